//! Frequency-domain feedforward noise algebra.
//!
//! Every spectrum here is a noise power normalized to the shot noise of the
//! beam it describes, so a value of 1.0 is the quantum noise limit.
//!
//! The feedforward output of a probe beam with single-beam noise `S`,
//! receiving a gain-scaled copy of the detected conjugate photocurrent, is
//!
//! ```text
//! S_f(g) = ηE·S + (1 − ηE) + g²·(ηD·S + 1 − ηD) + 2g·√(ηE·ηD)·C·cos(2πΩτ)
//! ```
//!
//! with `C = S − S₋` the probe/conjugate cross-correlation and `τ` any
//! uncompensated delay between the two arms. Minimizing over `g` at `τ = 0`
//! gives the optimal-gain prediction [`predict_optimal_noise`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Power ratio in dB (`10·log10`).
pub fn to_db(linear: f64) -> Result<f64> {
    if !(linear > 0.0) || !linear.is_finite() {
        return Err(Error::Domain(format!(
            "cannot convert {linear} to dB: value must be finite and > 0"
        )));
    }
    Ok(10.0 * linear.log10())
}

pub fn from_db(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

fn check_grid(frequencies: &[f64]) -> Result<()> {
    if frequencies.is_empty() {
        return Err(Error::Grid("empty frequency grid".into()));
    }
    if frequencies.iter().any(|f| !f.is_finite() || *f <= 0.0) {
        return Err(Error::Grid("frequencies must be finite and > 0".into()));
    }
    if frequencies.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Grid("frequencies must be strictly increasing".into()));
    }
    Ok(())
}

fn same_grid(a: &[f64], b: &[f64], what: &str) -> Result<()> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x != y) {
        return Err(Error::Grid(format!(
            "{what}: grids differ ({} vs {} points)",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Noise power relative to shot noise on a frequency grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedSpectrum {
    frequencies: Vec<f64>,
    values: Vec<f64>,
}

impl NormalizedSpectrum {
    pub fn new(frequencies: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        check_grid(&frequencies)?;
        if frequencies.len() != values.len() {
            return Err(Error::Grid(format!(
                "{} frequencies but {} values",
                frequencies.len(),
                values.len()
            )));
        }
        if let Some((f, v)) = frequencies
            .iter()
            .zip(&values)
            .find(|(_, v)| !v.is_finite() || **v <= 0.0)
        {
            return Err(Error::Domain(format!(
                "noise spectrum value {v} at {f} Hz must be finite and > 0"
            )));
        }
        Ok(Self {
            frequencies,
            values,
        })
    }

    pub fn flat(frequencies: Vec<f64>, value: f64) -> Result<Self> {
        let values = vec![value; frequencies.len()];
        Self::new(frequencies, values)
    }

    /// The quantum noise limit.
    pub fn shot_noise(frequencies: Vec<f64>) -> Result<Self> {
        Self::flat(frequencies, 1.0)
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn to_db(&self) -> Vec<f64> {
        self.values.iter().map(|v| 10.0 * v.log10()).collect()
    }

    /// Linear interpolation in frequency, held constant beyond the grid ends.
    pub fn interpolate(&self, frequency: f64) -> f64 {
        interpolate(&self.frequencies, &self.values, frequency)
    }

    pub(crate) fn map_values(&self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let values = self
            .frequencies
            .iter()
            .zip(&self.values)
            .map(|(&freq, &v)| f(freq, v))
            .collect();
        Self::new(self.frequencies.clone(), values)
    }
}

pub(crate) fn interpolate(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    debug_assert_eq!(xs.len(), ys.len());
    let n = xs.len();
    if x <= xs[0] {
        return ys[0];
    }
    if x >= xs[n - 1] {
        return ys[n - 1];
    }
    let hi = xs.partition_point(|&v| v <= x);
    let lo = hi - 1;
    let t = (x - xs[lo]) / (xs[hi] - xs[lo]);
    ys[lo] + t * (ys[hi] - ys[lo])
}

/// Noise of a twin-beam pair with equal single-beam spectra.
///
/// The cross-correlation is tied to the two noise spectra by `C = S − S₋`,
/// the unique choice for which the optimal feedforward reproduces the
/// closed-form prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwinBeamNoise {
    single_beam: NormalizedSpectrum,
    intensity_difference: NormalizedSpectrum,
    cross_correlation: Vec<f64>,
}

impl TwinBeamNoise {
    pub fn new(
        single_beam: NormalizedSpectrum,
        intensity_difference: NormalizedSpectrum,
    ) -> Result<Self> {
        same_grid(
            single_beam.frequencies(),
            intensity_difference.frequencies(),
            "twin beam spectra",
        )?;
        let cross_correlation: Vec<f64> = single_beam
            .values()
            .iter()
            .zip(intensity_difference.values())
            .map(|(s, d)| s - d)
            .collect();
        // A physical pair needs |C| <= S, i.e. 0 < S₋ < 2S.
        for ((f, s), d) in single_beam
            .frequencies()
            .iter()
            .zip(single_beam.values())
            .zip(intensity_difference.values())
        {
            if *d >= 2.0 * s {
                return Err(Error::Model {
                    frequency: *f,
                    message: format!(
                        "intensity-difference noise {d} exceeds twice the single-beam noise {s}"
                    ),
                });
            }
        }
        Ok(Self {
            single_beam,
            intensity_difference,
            cross_correlation,
        })
    }

    /// Builds from all three members, checking `C = S − S₋`.
    pub fn with_cross_correlation(
        single_beam: NormalizedSpectrum,
        intensity_difference: NormalizedSpectrum,
        cross_correlation: Vec<f64>,
    ) -> Result<Self> {
        let twin = Self::new(single_beam, intensity_difference)?;
        if cross_correlation.len() != twin.cross_correlation.len() {
            return Err(Error::Grid("cross-correlation length differs".into()));
        }
        for ((f, given), expect) in twin
            .frequencies()
            .iter()
            .zip(&cross_correlation)
            .zip(&twin.cross_correlation)
        {
            if !given.is_finite() || (given - expect).abs() > 1e-9 * expect.abs().max(1.0) {
                return Err(Error::Model {
                    frequency: *f,
                    message: format!("cross-correlation {given} != S - S- = {expect}"),
                });
            }
        }
        Ok(twin)
    }

    /// Uncorrelated shot-noise-limited beams.
    pub fn coherent(frequencies: Vec<f64>) -> Result<Self> {
        let unit = NormalizedSpectrum::shot_noise(frequencies)?;
        Self::new(unit.clone(), unit)
    }

    pub fn frequencies(&self) -> &[f64] {
        self.single_beam.frequencies()
    }

    pub fn single_beam(&self) -> &NormalizedSpectrum {
        &self.single_beam
    }

    pub fn intensity_difference(&self) -> &NormalizedSpectrum {
        &self.intensity_difference
    }

    pub fn cross_correlation(&self) -> &[f64] {
        &self.cross_correlation
    }

    /// The three members at an arbitrary frequency, by linear interpolation.
    pub fn at(&self, frequency: f64) -> (f64, f64, f64) {
        let s = self.single_beam.interpolate(frequency);
        let d = self.intensity_difference.interpolate(frequency);
        (s, d, s - d)
    }

    /// Re-evaluates the pair on another grid by linear interpolation.
    pub fn resample(&self, frequencies: Vec<f64>) -> Result<Self> {
        let s = frequencies
            .iter()
            .map(|&f| self.single_beam.interpolate(f))
            .collect();
        let d = frequencies
            .iter()
            .map(|&f| self.intensity_difference.interpolate(f))
            .collect();
        Self::new(
            NormalizedSpectrum::new(frequencies.clone(), s)?,
            NormalizedSpectrum::new(frequencies, d)?,
        )
    }
}

/// Probe-path transmission and conjugate detection efficiency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelEfficiencies {
    /// ηE: transmission of the probe through the delay line and actuator.
    pub probe_transmission: f64,
    /// ηD: quantum efficiency of the conjugate detector.
    pub detector_efficiency: f64,
}

impl ChannelEfficiencies {
    pub fn new(probe_transmission: f64, detector_efficiency: f64) -> Result<Self> {
        check_unit_interval("eta_E", probe_transmission)?;
        check_unit_interval("eta_D", detector_efficiency)?;
        Ok(Self {
            probe_transmission,
            detector_efficiency,
        })
    }

    pub fn lossless() -> Self {
        Self {
            probe_transmission: 1.0,
            detector_efficiency: 1.0,
        }
    }
}

pub(crate) fn check_unit_interval(name: &str, value: f64) -> Result<()> {
    if value > 0.0 && value <= 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} must lie in (0,1], got {value}")))
    }
}

/// A real electronic feedforward gain per analysis frequency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainProfile {
    frequencies: Vec<f64>,
    gains: Vec<f64>,
}

impl GainProfile {
    pub fn new(frequencies: Vec<f64>, gains: Vec<f64>) -> Result<Self> {
        check_grid(&frequencies)?;
        if frequencies.len() != gains.len() {
            return Err(Error::Grid(format!(
                "{} frequencies but {} gains",
                frequencies.len(),
                gains.len()
            )));
        }
        if gains.iter().any(|g| !g.is_finite()) {
            return Err(Error::Domain("gains must be finite".into()));
        }
        Ok(Self { frequencies, gains })
    }

    pub fn flat(frequencies: Vec<f64>, gain: f64) -> Result<Self> {
        let gains = vec![gain; frequencies.len()];
        Self::new(frequencies, gains)
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    pub fn gains(&self) -> &[f64] {
        &self.gains
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(
            self.frequencies.clone(),
            self.gains.iter().map(|g| g * factor).collect(),
        )
    }
}

/// How a feedforward gain is normalized.
///
/// The two conventions differ by a factor `√ηD` and give the same minimum
/// noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GainConvention {
    /// `√ηE·(S₋ − S)/(ηD·S + 1 − ηD)`, the optimum quoted alongside the
    /// closed-form prediction.
    Published,
    /// The minimizer of the quadratic noise form used by
    /// [`noise_with_gain`]: `−√(ηE·ηD)·C/(ηD·S + 1 − ηD)`. Equal to the
    /// published gain times `√ηD`.
    Quadratic,
}

/// Detected conjugate photocurrent noise, `ηD·S + 1 − ηD`.
fn detected_noise(s: f64, eff: &ChannelEfficiencies) -> f64 {
    let eta_d = eff.detector_efficiency;
    eta_d * s + (1.0 - eta_d)
}

fn check_finite_twin(s: f64, d: f64, f: f64) -> Result<()> {
    if !(s.is_finite() && d.is_finite()) || s <= 0.0 || d <= 0.0 {
        return Err(Error::Domain(format!(
            "non-finite or non-positive spectrum at {f} Hz (S={s}, S-={d})"
        )));
    }
    Ok(())
}

/// Optimal gain at one frequency in the given convention.
pub fn optimal_gain_value(
    s: f64,
    s_minus: f64,
    eff: &ChannelEfficiencies,
    convention: GainConvention,
) -> f64 {
    let published =
        eff.probe_transmission.sqrt() * (s_minus - s) / detected_noise(s, eff);
    match convention {
        GainConvention::Published => published,
        GainConvention::Quadratic => published * eff.detector_efficiency.sqrt(),
    }
}

/// Closed-form optimal-gain noise at one frequency.
pub fn optimal_noise_value(s: f64, s_minus: f64, eff: &ChannelEfficiencies) -> f64 {
    let (eta_e, eta_d) = (eff.probe_transmission, eff.detector_efficiency);
    let c = s - s_minus;
    eta_e * s + (1.0 - eta_e) - eta_e * eta_d * c * c / detected_noise(s, eff)
}

/// Quadratic-form noise at one frequency for an arbitrary gain (quadratic
/// convention) and a dephasing factor `cos(2πΩτ)`.
pub fn noise_value_with_gain(
    s: f64,
    s_minus: f64,
    eff: &ChannelEfficiencies,
    gain: f64,
    dephasing: f64,
) -> f64 {
    let (eta_e, eta_d) = (eff.probe_transmission, eff.detector_efficiency);
    let c = s - s_minus;
    eta_e * s
        + (1.0 - eta_e)
        + gain * gain * detected_noise(s, eff)
        + 2.0 * gain * (eta_e * eta_d).sqrt() * c * dephasing
}

/// Optimal feedforward gain in the published convention.
pub fn optimal_gain(twin: &TwinBeamNoise, eff: &ChannelEfficiencies) -> Result<GainProfile> {
    optimal_gain_with(twin, eff, GainConvention::Published)
}

pub fn optimal_gain_with(
    twin: &TwinBeamNoise,
    eff: &ChannelEfficiencies,
    convention: GainConvention,
) -> Result<GainProfile> {
    let mut gains = Vec::with_capacity(twin.frequencies().len());
    for ((f, s), d) in twin
        .frequencies()
        .iter()
        .zip(twin.single_beam().values())
        .zip(twin.intensity_difference().values())
    {
        check_finite_twin(*s, *d, *f)?;
        gains.push(optimal_gain_value(*s, *d, eff, convention));
    }
    GainProfile::new(twin.frequencies().to_vec(), gains)
}

/// Probe noise after feedforward with the optimal gain at every frequency.
pub fn predict_optimal_noise(
    twin: &TwinBeamNoise,
    eff: &ChannelEfficiencies,
) -> Result<NormalizedSpectrum> {
    let mut values = Vec::with_capacity(twin.frequencies().len());
    for ((f, s), d) in twin
        .frequencies()
        .iter()
        .zip(twin.single_beam().values())
        .zip(twin.intensity_difference().values())
    {
        check_finite_twin(*s, *d, *f)?;
        values.push(optimal_noise_value(*s, *d, eff));
    }
    NormalizedSpectrum::new(twin.frequencies().to_vec(), values)
}

/// Lossless, high-gain limit of the optimal feedforward: `2·S₋`.
pub fn ideal_limit(s_minus: &NormalizedSpectrum) -> NormalizedSpectrum {
    NormalizedSpectrum {
        frequencies: s_minus.frequencies.clone(),
        values: s_minus.values.iter().map(|v| 2.0 * v).collect(),
    }
}

/// Probe noise for a given gain profile (quadratic convention) and a
/// residual delay between the probe and the feedforward signal.
pub fn noise_with_gain(
    twin: &TwinBeamNoise,
    eff: &ChannelEfficiencies,
    gain: &GainProfile,
    residual_delay: f64,
) -> Result<NormalizedSpectrum> {
    same_grid(twin.frequencies(), gain.frequencies(), "noise_with_gain")?;
    if !(residual_delay >= 0.0) || !residual_delay.is_finite() {
        return Err(Error::Domain(format!(
            "residual delay must be finite and >= 0, got {residual_delay}"
        )));
    }
    let values = twin
        .frequencies()
        .iter()
        .zip(twin.single_beam().values())
        .zip(twin.intensity_difference().values())
        .zip(gain.gains())
        .map(|(((f, s), d), g)| {
            let dephasing = (2.0 * std::f64::consts::PI * f * residual_delay).cos();
            noise_value_with_gain(*s, *d, eff, *g, dephasing)
        })
        .collect();
    NormalizedSpectrum::new(twin.frequencies().to_vec(), values)
}

/// Beam-splitter loss: `η·S + (1 − η)`.
pub fn apply_loss(spectrum: &NormalizedSpectrum, transmission: f64) -> Result<NormalizedSpectrum> {
    check_unit_interval("transmission", transmission)?;
    spectrum.map_values(|_, v| transmission * v + (1.0 - transmission))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn grid() -> Vec<f64> {
        vec![2e5, 3.6e5, 1e6, 2e6]
    }

    fn flat_twin(s: f64, d: f64) -> TwinBeamNoise {
        TwinBeamNoise::new(
            NormalizedSpectrum::flat(grid(), s).unwrap(),
            NormalizedSpectrum::flat(grid(), d).unwrap(),
        )
        .unwrap()
    }

    fn scenario_eff() -> ChannelEfficiencies {
        ChannelEfficiencies::new(0.88, 0.95).unwrap()
    }

    #[test]
    fn optimal_gain_examples() {
        let g = optimal_gain(&flat_twin(2.0, 0.1820), &scenario_eff()).unwrap();
        assert_relative_eq!(g.gains()[1], -0.874582, epsilon = 1e-6);

        let g = optimal_gain(&flat_twin(1.3, 1.3), &scenario_eff()).unwrap();
        assert!(g.gains().iter().all(|v| *v == 0.0));

        let g = optimal_gain(&flat_twin(1000.0, 0.5), &ChannelEfficiencies::lossless()).unwrap();
        assert_relative_eq!(g.gains()[0], -0.9995, epsilon = 1e-12);
    }

    #[test]
    fn gain_conventions_differ_by_sqrt_eta_d() {
        let twin = flat_twin(5.4954, 0.18197);
        let eff = scenario_eff();
        let published = optimal_gain_with(&twin, &eff, GainConvention::Published).unwrap();
        let quadratic = optimal_gain_with(&twin, &eff, GainConvention::Quadratic).unwrap();
        assert_relative_eq!(
            quadratic.gains()[0],
            published.gains()[0] * 0.95f64.sqrt(),
            epsilon = 1e-14
        );
        // Only the quadratic convention minimizes the quadratic form.
        let via_quadratic = noise_with_gain(&twin, &eff, &quadratic, 0.0).unwrap();
        let optimum = predict_optimal_noise(&twin, &eff).unwrap();
        assert_relative_eq!(via_quadratic.values()[0], optimum.values()[0], epsilon = 1e-12);
        let via_published = noise_with_gain(&twin, &eff, &published, 0.0).unwrap();
        assert!(via_published.values()[0] > optimum.values()[0]);
    }

    #[test]
    fn predict_optimal_noise_examples() {
        let sf = predict_optimal_noise(&flat_twin(2.0, 0.1820), &scenario_eff()).unwrap();
        assert_relative_eq!(sf.values()[0], 0.463034, epsilon = 1e-6);
        assert_relative_eq!(to_db(sf.values()[0]).unwrap(), -3.3439, epsilon = 1e-4);

        let sf = predict_optimal_noise(&flat_twin(1.0, 1.0), &scenario_eff()).unwrap();
        assert_relative_eq!(sf.values()[2], 1.0, epsilon = 1e-15);

        let sf =
            predict_optimal_noise(&flat_twin(1000.0, 0.5), &ChannelEfficiencies::lossless())
                .unwrap();
        assert_relative_eq!(sf.values()[0], 0.99975, epsilon = 1e-12);
    }

    #[test]
    fn ideal_limit_examples() {
        let s = NormalizedSpectrum::flat(grid(), 0.1820).unwrap();
        let lim = ideal_limit(&s);
        assert_relative_eq!(lim.values()[0], 0.3640);
        assert_relative_eq!(to_db(lim.values()[0]).unwrap(), -4.389, epsilon = 1e-3);
        assert_eq!(
            ideal_limit(&NormalizedSpectrum::flat(grid(), 0.5).unwrap()).values()[0],
            1.0
        );
        assert_eq!(
            ideal_limit(&NormalizedSpectrum::shot_noise(grid()).unwrap()).values()[3],
            2.0
        );
    }

    #[test]
    fn zero_gain_is_pure_loss() {
        let twin = flat_twin(5.0, 0.3);
        let eff = scenario_eff();
        let zero = GainProfile::flat(grid(), 0.0).unwrap();
        let out = noise_with_gain(&twin, &eff, &zero, 65e-9).unwrap();
        for v in out.values() {
            assert_relative_eq!(*v, 0.88 * 5.0 + 0.12, epsilon = 1e-12);
        }
    }

    #[test]
    fn delay_makes_noise_oscillate_between_difference_and_sum_like_levels() {
        let tau = 65e-9;
        // Points where cos(2πΩτ) = +1 and −1.
        let freqs = vec![1.0 / (2.0 * tau), 1.0 / tau];
        let twin = TwinBeamNoise::new(
            NormalizedSpectrum::flat(freqs.clone(), 5.4954).unwrap(),
            NormalizedSpectrum::flat(freqs.clone(), 0.18197).unwrap(),
        )
        .unwrap();
        let eff = scenario_eff();
        let g = optimal_gain_with(&twin, &eff, GainConvention::Quadratic).unwrap();
        let out = noise_with_gain(&twin, &eff, &g, tau).unwrap();
        let optimum = predict_optimal_noise(&twin, &eff).unwrap();
        assert_relative_eq!(out.values()[1], optimum.values()[1], epsilon = 1e-9);
        // At the anti-phase point the correlation term adds instead of cancels.
        let (s, d) = (5.4954, 0.18197);
        let gq = g.gains()[0];
        let expected = 0.88 * s + 0.12 + gq * gq * (0.95 * s + 0.05)
            - 2.0 * gq * (0.88f64 * 0.95).sqrt() * (s - d);
        assert_relative_eq!(out.values()[0], expected, epsilon = 1e-9);
        assert!(out.values()[0] > 0.88 * s + 0.12);
        // Full period 1/τ.
        assert_relative_eq!(1.0 / tau / 1e6, 15.3846, epsilon = 1e-4);
    }

    #[test]
    fn apply_loss_examples() {
        let unit = NormalizedSpectrum::shot_noise(grid()).unwrap();
        for eta in [0.01, 0.5, 0.88, 1.0] {
            assert_eq!(apply_loss(&unit, eta).unwrap().values(), unit.values());
        }
        let s = apply_loss(&NormalizedSpectrum::flat(grid(), 0.1820).unwrap(), 0.88).unwrap();
        assert_relative_eq!(s.values()[0], 0.28016, epsilon = 1e-12);
        assert_relative_eq!(to_db(s.values()[0]).unwrap(), -5.5260, epsilon = 1e-4);
        let s = apply_loss(&NormalizedSpectrum::flat(grid(), 5.494).unwrap(), 0.5).unwrap();
        assert_relative_eq!(s.values()[0], 3.247, epsilon = 1e-12);
        assert!(matches!(apply_loss(&unit, 1.2), Err(Error::Domain(_))));
        assert!(matches!(apply_loss(&unit, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn db_conversions() {
        assert_eq!(to_db(1.0).unwrap(), 0.0);
        assert_relative_eq!(from_db(-7.4), 0.18197, epsilon = 1e-5);
        assert_relative_eq!(to_db(0.5).unwrap(), -3.0103, epsilon = 1e-4);
        assert!(to_db(0.0).is_err());
        assert!(to_db(-1.0).is_err());
        for db in [-20.0, -7.4, 0.0, 3.3, 17.0] {
            assert_relative_eq!(to_db(from_db(db)).unwrap(), db, max_relative = 1e-9, epsilon = 1e-12);
        }
    }

    #[test]
    fn grid_and_domain_errors() {
        let other = TwinBeamNoise::coherent(vec![1.0, 2.0]).unwrap();
        let g = GainProfile::flat(grid(), -0.5).unwrap();
        assert!(matches!(
            noise_with_gain(&other, &scenario_eff(), &g, 0.0),
            Err(Error::Grid(_))
        ));
        assert!(NormalizedSpectrum::new(vec![1.0, 1.0], vec![1.0, 1.0]).is_err());
        assert!(NormalizedSpectrum::new(vec![1.0, 2.0], vec![1.0, f64::NAN]).is_err());
        assert!(NormalizedSpectrum::new(vec![1.0, 2.0], vec![1.0, 0.0]).is_err());
        assert!(ChannelEfficiencies::new(1.2, 0.9).is_err());
        assert!(GainProfile::new(grid(), vec![0.0, f64::INFINITY, 0.0, 0.0]).is_err());
        let s = NormalizedSpectrum::flat(grid(), 1.0).unwrap();
        let d = NormalizedSpectrum::flat(grid(), 2.5).unwrap();
        assert!(matches!(TwinBeamNoise::new(s, d), Err(Error::Model { .. })));
    }

    #[test]
    fn explicit_cross_correlation_must_be_consistent() {
        let s = NormalizedSpectrum::flat(grid(), 3.0).unwrap();
        let d = NormalizedSpectrum::flat(grid(), 0.5).unwrap();
        assert!(TwinBeamNoise::with_cross_correlation(s.clone(), d.clone(), vec![2.5; 4]).is_ok());
        assert!(TwinBeamNoise::with_cross_correlation(s, d, vec![2.4; 4]).is_err());
    }
}
