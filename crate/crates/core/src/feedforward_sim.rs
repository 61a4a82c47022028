//! Time-domain Monte Carlo of the feedforward chain.
//!
//! Traces are photocurrent fluctuations scaled so that shot noise has unit
//! one-sided PSD, i.e. white shot noise has variance `sample_rate/2`.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fwm_source::{ScenarioPreset, DISPLACEMENT_TRANSMISSION};
use crate::noise_model::{check_unit_interval, ChannelEfficiencies, TwinBeamNoise};
use crate::spectral::{self, SpectrumEstimate};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhotocurrentTrace {
    pub label: String,
    pub sample_rate: f64,
    pub samples: Vec<f64>,
}

impl PhotocurrentTrace {
    pub fn new(label: impl Into<String>, sample_rate: f64, samples: Vec<f64>) -> Result<Self> {
        let label = label.into();
        if !(sample_rate > 0.0) || !sample_rate.is_finite() {
            return Err(Error::Domain(format!("sample rate of '{label}' must be > 0")));
        }
        if samples.len() < 2 {
            return Err(Error::Domain(format!("trace '{label}' needs at least 2 samples")));
        }
        if let Some(i) = samples.iter().position(|x| !x.is_finite()) {
            return Err(Error::Domain(format!("trace '{label}' has a non-finite sample at {i}")));
        }
        Ok(Self {
            label,
            sample_rate,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate
    }

    fn with_samples(&self, label: &str, samples: Vec<f64>) -> Self {
        Self {
            label: label.to_string(),
            sample_rate: self.sample_rate,
            samples,
        }
    }

    fn relabeled(mut self, label: &str) -> Self {
        self.label = label.to_string();
        self
    }

    /// Drops `margin` samples from both ends.
    fn trimmed(&self, margin: usize) -> Self {
        self.with_samples(&self.label, self.samples[margin..self.len() - margin].to_vec())
    }
}

fn check_aligned(a: &PhotocurrentTrace, b: &PhotocurrentTrace) -> Result<()> {
    if a.sample_rate != b.sample_rate || a.len() != b.len() {
        return Err(Error::Alignment(format!(
            "'{}' ({} samples at {} Hz) and '{}' ({} samples at {} Hz)",
            a.label,
            a.len(),
            a.sample_rate,
            b.label,
            b.len(),
            b.sample_rate
        )));
    }
    Ok(())
}

fn white_noise(rng: &mut impl Rng, n: usize, sample_rate: f64, psd: f64) -> Vec<f64> {
    let sigma = (psd * sample_rate / 2.0).sqrt();
    (0..n)
        .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn complex_normal(rng: &mut impl Rng) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// Deterministic RNG for one stage of a run.
pub fn stage_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_SOURCE: u64 = 1;
const STREAM_DETECTOR: u64 = 2;
const STREAM_ACTUATOR: u64 = 3;

/// Frequency response of the conjugate photodetector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DetectorResponse {
    /// Single-pole magnitude roll-off without phase; the detector's group
    /// delay is part of the configured electronic delay.
    #[default]
    ZeroPhase,
    /// Causal single-pole low-pass whose phase adds to the electronic delay.
    Causal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detector {
    /// 3 dB bandwidth (Hz); infinite for an ideal detector.
    pub bandwidth: f64,
    pub response: DetectorResponse,
}

impl Detector {
    pub fn ideal() -> Self {
        Self {
            bandwidth: f64::INFINITY,
            response: DetectorResponse::ZeroPhase,
        }
    }

    pub fn transfer(&self, frequency: f64, sample_rate: f64) -> Complex64 {
        if self.bandwidth.is_infinite() {
            return Complex64::new(1.0, 0.0);
        }
        match self.response {
            DetectorResponse::ZeroPhase => {
                Complex64::new(1.0 / (1.0 + (frequency / self.bandwidth).powi(2)).sqrt(), 0.0)
            }
            DetectorResponse::Causal => {
                let alpha = (-2.0 * PI * self.bandwidth / sample_rate).exp();
                let z1 = Complex64::from_polar(1.0, -2.0 * PI * frequency / sample_rate);
                (1.0 - alpha) / (1.0 - alpha * z1)
            }
        }
    }
}

/// Filters a real sequence in the frequency domain over the whole (circular)
/// record.
fn circular_filter(samples: &[f64], sample_rate: f64, gain: impl Fn(f64) -> f64) -> Vec<f64> {
    let n = samples.len();
    let mut planner = FftPlanner::new();
    let mut buf: Vec<Complex64> = samples.iter().map(|x| Complex64::new(*x, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, v) in buf.iter_mut().enumerate() {
        let bin = k.min(n - k);
        *v *= gain(bin as f64 * sample_rate / n as f64) / n as f64;
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.into_iter().map(|c| c.re).collect()
}

/// Realizes the twin-beam spectra as a pair of stationary Gaussian traces.
///
/// Each FFT bin draws two independent complex normals and mixes them with
/// the symmetric square root of `[[S, C], [C, S]]`; both real traces come
/// out of a single inverse transform.
pub fn synthesize_twin_traces(
    twin: &TwinBeamNoise,
    sample_rate: f64,
    n_samples: usize,
    rng: &mut impl Rng,
) -> Result<(PhotocurrentTrace, PhotocurrentTrace)> {
    if n_samples < 4 {
        return Err(Error::Domain("need at least 4 samples".into()));
    }
    let n = n_samples;
    let half = n / 2;
    let scale = (sample_rate / 2.0).sqrt();
    let freqs = twin.frequencies();
    let s_vals = twin.single_beam().values();
    let c_vals = twin.cross_correlation();

    let mut spectrum = vec![Complex64::default(); n];
    let mut cursor = 0usize;
    for k in 1..=half {
        let f = k as f64 * sample_rate / n as f64;
        while cursor + 2 < freqs.len() && freqs[cursor + 1] < f {
            cursor += 1;
        }
        let (s, c) = if f <= freqs[0] {
            (s_vals[0], c_vals[0])
        } else if f >= freqs[freqs.len() - 1] {
            (s_vals[freqs.len() - 1], c_vals[freqs.len() - 1])
        } else {
            let j = cursor;
            let t = (f - freqs[j]) / (freqs[j + 1] - freqs[j]);
            (
                s_vals[j] + t * (s_vals[j + 1] - s_vals[j]),
                c_vals[j] + t * (c_vals[j + 1] - c_vals[j]),
            )
        };
        if c * c > s * s || s <= 0.0 {
            return Err(Error::Model {
                frequency: f,
                message: format!("cross-spectral matrix not positive semidefinite (S={s}, C={c})"),
            });
        }
        let (plus, minus) = ((s + c).sqrt(), (s - c).sqrt());
        let a = 0.5 * (plus + minus);
        let b = 0.5 * (plus - minus);
        let (x, y) = if 2 * k == n {
            let z1: f64 = rng.sample(StandardNormal);
            let z2: f64 = rng.sample(StandardNormal);
            (Complex64::new(a * z1 + b * z2, 0.0), Complex64::new(b * z1 + a * z2, 0.0))
        } else {
            let z1 = complex_normal(rng);
            let z2 = complex_normal(rng);
            (a * z1 + b * z2, b * z1 + a * z2)
        };
        let (x, y) = (x * scale, y * scale);
        // Hermitian halves for each real trace, packed as x + i·y.
        spectrum[k] = x + Complex64::i() * y;
        if 2 * k != n {
            spectrum[n - k] = x.conj() + Complex64::i() * y.conj();
        }
    }
    let mut planner = FftPlanner::new();
    planner.plan_fft_inverse(n).process(&mut spectrum);
    let norm = 1.0 / (n as f64).sqrt();
    let probe = spectrum.iter().map(|c| c.re * norm).collect();
    let conjugate = spectrum.iter().map(|c| c.im * norm).collect();
    Ok((
        PhotocurrentTrace::new("probe_in", sample_rate, probe)?,
        PhotocurrentTrace::new("conjugate_in", sample_rate, conjugate)?,
    ))
}

/// Photodetection: loss `efficiency` with fresh vacuum, detector roll-off,
/// then additive electronic noise of PSD `electronic_noise_psd`.
pub fn detect(
    trace: &PhotocurrentTrace,
    efficiency: f64,
    detector: &Detector,
    electronic_noise_psd: f64,
    rng: &mut impl Rng,
) -> Result<PhotocurrentTrace> {
    check_unit_interval("detector efficiency", efficiency)?;
    if !(electronic_noise_psd >= 0.0) {
        return Err(Error::Domain(format!(
            "electronic noise PSD must be >= 0, got {electronic_noise_psd}"
        )));
    }
    let fs = trace.sample_rate;
    let mut x = trace.samples.clone();
    if efficiency < 1.0 {
        let vacuum = white_noise(rng, x.len(), fs, 1.0);
        let (t, r) = (efficiency.sqrt(), (1.0 - efficiency).sqrt());
        for (xi, vi) in x.iter_mut().zip(&vacuum) {
            *xi = t * *xi + r * vi;
        }
    }
    if detector.bandwidth.is_finite() {
        x = match detector.response {
            DetectorResponse::ZeroPhase => {
                circular_filter(&x, fs, |f| detector.transfer(f, fs).re)
            }
            DetectorResponse::Causal => {
                let alpha = (-2.0 * PI * detector.bandwidth / fs).exp();
                let mut state = 0.0;
                x.iter()
                    .map(|v| {
                        state = alpha * state + (1.0 - alpha) * v;
                        state
                    })
                    .collect()
            }
        };
    }
    if electronic_noise_psd > 0.0 {
        let e = white_noise(rng, x.len(), fs, electronic_noise_psd);
        for (xi, ei) in x.iter_mut().zip(&e) {
            *xi += ei;
        }
    }
    PhotocurrentTrace::new("conjugate_detected", fs, x)
}

fn dc_block_coefficient(cutoff: f64, sample_rate: f64) -> f64 {
    (-2.0 * PI * cutoff / sample_rate).exp()
}

/// Response of [`dc_block`] at `frequency`.
pub fn dc_block_transfer(cutoff: f64, frequency: f64, sample_rate: f64) -> Complex64 {
    if cutoff == 0.0 {
        return Complex64::new(1.0, 0.0);
    }
    let a = dc_block_coefficient(cutoff, sample_rate);
    let z1 = Complex64::from_polar(1.0, -2.0 * PI * frequency / sample_rate);
    0.5 * (1.0 + a) * (1.0 - z1) / (1.0 - a * z1)
}

/// First-order high-pass `y[n] = a·y[n−1] + (1+a)/2·(x[n] − x[n−1])`, unit
/// gain at Nyquist, started from rest; `cutoff = 0` is the identity.
pub fn dc_block(trace: &PhotocurrentTrace, cutoff: f64) -> Result<PhotocurrentTrace> {
    if !(cutoff >= 0.0) || cutoff >= trace.sample_rate / 2.0 {
        return Err(Error::Domain(format!(
            "DC-block cutoff {cutoff} Hz must lie in [0, sample_rate/2)"
        )));
    }
    if cutoff == 0.0 {
        return Ok(trace.clone());
    }
    let a = dc_block_coefficient(cutoff, trace.sample_rate);
    let b = 0.5 * (1.0 + a);
    let (mut prev_x, mut y) = (0.0, 0.0);
    let out = trace
        .samples
        .iter()
        .map(|&x| {
            y = a * y + b * (x - prev_x);
            prev_x = x;
            y
        })
        .collect();
    Ok(trace.with_samples(&trace.label, out))
}

/// Half-length of the fractional-delay interpolator (taps span `±M`).
pub const DELAY_HALF_TAPS: usize = 32;
const KAISER_BETA: f64 = 8.6;

fn bessel_i0(x: f64) -> f64 {
    let mut term = 1.0;
    let mut sum = 1.0;
    let q = 0.25 * x * x;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < 1e-17 * sum {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Kaiser-windowed sinc interpolator for a delay of `samples`.
#[derive(Debug, Clone, PartialEq)]
pub struct FractionalDelay {
    /// Integer part of the delay.
    pub shift: usize,
    /// Taps for offsets `-M..=M` around the shifted position.
    pub taps: Vec<f64>,
}

impl FractionalDelay {
    pub fn new(delay_samples: f64) -> Result<Self> {
        if !(delay_samples >= 0.0) || !delay_samples.is_finite() {
            return Err(Error::Domain(format!("delay must be >= 0, got {delay_samples} samples")));
        }
        let shift = delay_samples.floor() as usize;
        let mu = delay_samples - shift as f64;
        let m = DELAY_HALF_TAPS as i64;
        let taps = if mu == 0.0 {
            (-m..=m).map(|j| if j == 0 { 1.0 } else { 0.0 }).collect()
        } else {
            let half_width = (m + 1) as f64;
            let norm = bessel_i0(KAISER_BETA);
            let raw: Vec<f64> = (-m..=m)
                .map(|j| {
                    let t = j as f64 - mu;
                    let w = bessel_i0(KAISER_BETA * (1.0 - (t / half_width).powi(2)).sqrt()) / norm;
                    sinc(t) * w
                })
                .collect();
            let dc: f64 = raw.iter().sum();
            raw.into_iter().map(|h| h / dc).collect()
        };
        Ok(Self { shift, taps })
    }

    /// DTFT of the interpolator including the integer shift.
    pub fn transfer(&self, frequency: f64, sample_rate: f64) -> Complex64 {
        let w = 2.0 * PI * frequency / sample_rate;
        let m = DELAY_HALF_TAPS as f64;
        self.taps
            .iter()
            .enumerate()
            .map(|(i, h)| Complex64::from_polar(*h, -w * (self.shift as f64 + i as f64 - m)))
            .sum()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len() as i64;
        let m = DELAY_HALF_TAPS as i64;
        let shift = self.shift as i64;
        (0..n)
            .map(|i| {
                let mut acc = 0.0;
                for (k, h) in self.taps.iter().enumerate() {
                    let j = i - shift - (k as i64 - m);
                    if (0..n).contains(&j) {
                        acc += h * x[j as usize];
                    }
                }
                acc
            })
            .collect()
    }
}

/// Band-limited delay by `tau` seconds; samples needed from before the
/// record are zero and are expected to be trimmed by the caller.
pub fn delay(trace: &PhotocurrentTrace, tau: f64) -> Result<PhotocurrentTrace> {
    if !(tau >= 0.0) || tau >= trace.duration() {
        return Err(Error::Domain(format!(
            "delay {tau} s must lie in [0, {}) s",
            trace.duration()
        )));
    }
    if tau == 0.0 {
        return Ok(trace.clone());
    }
    let fd = FractionalDelay::new(tau * trace.sample_rate)?;
    Ok(trace.with_samples(&trace.label, fd.apply(&trace.samples)))
}

/// Additive electro-optic actuation `√ηE·(x_p + g·i_c) + √(1−ηE)·v`.
pub fn actuate_eom(
    probe: &PhotocurrentTrace,
    control: &PhotocurrentTrace,
    gain: f64,
    eta_e: f64,
    rng: &mut impl Rng,
) -> Result<PhotocurrentTrace> {
    check_aligned(probe, control)?;
    check_unit_interval("eta_E", eta_e)?;
    if !gain.is_finite() {
        return Err(Error::Domain(format!("gain must be finite, got {gain}")));
    }
    let t = eta_e.sqrt();
    let r = (1.0 - eta_e).sqrt();
    let vacuum = if eta_e < 1.0 {
        white_noise(rng, probe.len(), probe.sample_rate, 1.0)
    } else {
        vec![0.0; probe.len()]
    };
    let out = probe
        .samples
        .iter()
        .zip(&control.samples)
        .zip(&vacuum)
        .map(|((xp, ic), v)| t * (xp + gain * ic) + r * v)
        .collect();
    PhotocurrentTrace::new("probe_out", probe.sample_rate, out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Actuator {
    /// Electro-optic modulator with the scenario's probe transmission.
    #[default]
    Eom,
    /// Displacement on a 99/1 beam splitter.
    Displacement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub sample_rate: f64,
    pub duration: f64,
    pub rng_seed: u64,
    pub detector_bandwidth: f64,
    pub detector_response: DetectorResponse,
    /// Electronic noise PSD of the conjugate detector, relative to shot noise.
    pub electronic_noise_psd: f64,
    pub dc_block_cutoff: f64,
    /// Latency of the conjugate arm (s).
    pub electronic_delay: f64,
    /// Delay of the probe delay line (s); applied only when compensating.
    pub optical_delay: f64,
    /// Delay of the probe relative to the conjugate at the source (s).
    pub source_delay: f64,
    pub excess_noise: f64,
    pub source_transmission: f64,
    /// Analyzer resolution bandwidth (Hz).
    pub rbw: f64,
    /// Welch averages; `None` uses every segment available.
    pub averages: Option<usize>,
}

/// Upper bound on simulated samples per trace.
pub const MAX_SAMPLES: usize = 40_000_000;

impl SimConfig {
    pub fn for_preset(preset: &ScenarioPreset) -> Self {
        Self {
            sample_rate: 50e6,
            duration: 0.2,
            rng_seed: 1,
            detector_bandwidth: preset.detector_bandwidth,
            detector_response: DetectorResponse::ZeroPhase,
            electronic_noise_psd: 0.0,
            dc_block_cutoff: 1e3,
            electronic_delay: preset.electronic_delay,
            optical_delay: preset.optical_delay(),
            source_delay: 0.0,
            excess_noise: 0.0,
            source_transmission: 1.0,
            rbw: 30e3,
            averages: None,
        }
    }

    pub fn n_samples(&self) -> usize {
        (self.duration * self.sample_rate).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("sample_rate", self.sample_rate),
            ("duration", self.duration),
            ("detector_bandwidth", self.detector_bandwidth),
            ("rbw", self.rbw),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || v.is_nan() {
                return Err(Error::Domain(format!("{name} must be > 0, got {v}")));
            }
        }
        let non_negative = [
            ("electronic_noise_psd", self.electronic_noise_psd),
            ("dc_block_cutoff", self.dc_block_cutoff),
            ("electronic_delay", self.electronic_delay),
            ("optical_delay", self.optical_delay),
            ("source_delay", self.source_delay),
            ("excess_noise", self.excess_noise),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Domain(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        check_unit_interval("source_transmission", self.source_transmission)?;
        if self.detector_bandwidth.is_finite() && !(self.sample_rate > 2.0 * self.detector_bandwidth) {
            return Err(Error::Domain(format!(
                "sample_rate ({}) must exceed twice the detector bandwidth ({})",
                self.sample_rate, self.detector_bandwidth
            )));
        }
        if !(self.dc_block_cutoff < self.detector_bandwidth) {
            return Err(Error::Domain(format!(
                "dc_block_cutoff ({}) must be below the detector bandwidth ({})",
                self.dc_block_cutoff, self.detector_bandwidth
            )));
        }
        let n = self.n_samples();
        if n > MAX_SAMPLES {
            return Err(Error::Domain(format!(
                "duration·sample_rate = {n} samples exceeds the limit of {MAX_SAMPLES}"
            )));
        }
        let longest = self.electronic_delay.max(self.optical_delay).max(self.source_delay);
        if longest * 10.0 >= self.duration {
            return Err(Error::Domain(format!(
                "delays ({longest} s) must be much shorter than the duration ({} s)",
                self.duration
            )));
        }
        if self.averages == Some(0) {
            return Err(Error::Domain("averages must be >= 1".into()));
        }
        Ok(())
    }

    fn detector(&self) -> Detector {
        Detector {
            bandwidth: self.detector_bandwidth,
            response: self.detector_response,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub compensate_delay: bool,
    /// Feedforward gain in the published convention; `None` uses the
    /// optimum at the analysis frequency.
    pub gain_override: Option<f64>,
    pub variant: Actuator,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            compensate_delay: true,
            gain_override: None,
            variant: Actuator::Eom,
        }
    }
}

/// Stage labels in chain order.
pub const STAGES: [&str; 7] = [
    "probe_in",
    "conjugate_in",
    "twin_difference",
    "conjugate_detected",
    "control",
    "probe_delayed",
    "probe_out",
];

/// A stage spectrum normalized to that stage's shot-noise level, with the
/// analytic expectation on the same grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpectrum {
    pub estimate: SpectrumEstimate,
    pub prediction: Vec<f64>,
}

/// The feedforward gain of a run in its three conventions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AppliedGain {
    /// Multiplies the control photocurrent inside the actuator.
    pub actuator: f64,
    /// Coefficient of the detected conjugate in the output field,
    /// `√ηE × actuator`; the convention of the quadratic noise form.
    pub quadratic: f64,
    /// `quadratic/√ηD`, the convention of the closed-form optimum.
    pub published: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEcho {
    pub preset: ScenarioPreset,
    pub config: SimConfig,
    pub options: RunOptions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub traces: BTreeMap<String, PhotocurrentTrace>,
    pub spectra: BTreeMap<String, StageSpectrum>,
    pub config_echo: RunEcho,
    pub rng_seed_used: u64,
    pub gain: AppliedGain,
    pub efficiencies: ChannelEfficiencies,
    /// Probe-arm delay minus conjugate-arm delay seen at the actuator (s).
    pub residual_delay: f64,
    pub twin: TwinBeamNoise,
}

/// Linear transfer functions of the run's signal paths.
struct Chain {
    sample_rate: f64,
    detector: Detector,
    dc_cutoff: f64,
    source: Option<FractionalDelay>,
    electronic: Option<FractionalDelay>,
    optical: Option<FractionalDelay>,
}

fn optional_delay(tau: f64, fs: f64) -> Result<Option<FractionalDelay>> {
    if tau == 0.0 {
        Ok(None)
    } else {
        FractionalDelay::new(tau * fs).map(Some)
    }
}

fn response(fd: &Option<FractionalDelay>, f: f64, fs: f64) -> Complex64 {
    fd.as_ref()
        .map_or(Complex64::new(1.0, 0.0), |d| d.transfer(f, fs))
}

impl Chain {
    fn source(&self, f: f64) -> Complex64 {
        response(&self.source, f, self.sample_rate)
    }

    fn probe(&self, f: f64) -> Complex64 {
        self.source(f) * response(&self.optical, f, self.sample_rate)
    }

    /// Detected conjugate to control, excluding the detector.
    fn post_detector(&self, f: f64) -> Complex64 {
        dc_block_transfer(self.dc_cutoff, f, self.sample_rate)
            * response(&self.electronic, f, self.sample_rate)
    }

    fn control(&self, f: f64) -> Complex64 {
        self.detector.transfer(f, self.sample_rate) * self.post_detector(f)
    }
}

/// Inputs of the per-frequency output formula.
struct OutputModel<'a> {
    chain: &'a Chain,
    eff: ChannelEfficiencies,
    electronic_noise: f64,
}

impl OutputModel<'_> {
    /// Probe-out PSD for a quadratic-convention gain `g` at `f`.
    fn noise(&self, s: f64, c: f64, g: f64, f: f64) -> f64 {
        let (eta_e, eta_d) = (self.eff.probe_transmission, self.eff.detector_efficiency);
        let hp = self.chain.probe(f);
        let hc = self.chain.control(f);
        let hpost = self.chain.post_detector(f).norm_sqr();
        let detected = eta_d * s + 1.0 - eta_d;
        eta_e * hp.norm_sqr() * s
            + 1.0
            - eta_e
            + g * g * (hc.norm_sqr() * detected + hpost * self.electronic_noise)
            + 2.0 * g * (eta_e * eta_d).sqrt() * c * (hp * hc.conj()).re
    }

    fn optimal_gain(&self, s: f64, c: f64, f: f64) -> f64 {
        let eta_d = self.eff.detector_efficiency;
        let hp = self.chain.probe(f);
        let hc = self.chain.control(f);
        let hpost = self.chain.post_detector(f).norm_sqr();
        let detected = eta_d * s + 1.0 - eta_d;
        -(self.eff.probe_transmission * eta_d).sqrt() * c * (hp * hc.conj()).re
            / (hc.norm_sqr() * detected + hpost * self.electronic_noise)
    }
}

/// Runs the full chain: synthesis, conjugate detection, DC block,
/// electronic delay, gain, optional probe delay line, actuation.
pub fn run(preset: &ScenarioPreset, cfg: &SimConfig, options: &RunOptions) -> Result<RunResult> {
    preset.validate()?;
    cfg.validate()?;
    let fs = cfg.sample_rate;
    let n = cfg.n_samples();
    let eta_e = match options.variant {
        Actuator::Eom => preset.eta_e,
        Actuator::Displacement => DISPLACEMENT_TRANSMISSION,
    };
    let eff = ChannelEfficiencies::new(eta_e, preset.eta_d)?;

    // Source spectra on a uniform grid; the synthesizer interpolates onto
    // its bins.
    const SOURCE_GRID: usize = 4000;
    let grid: Vec<f64> = (1..=SOURCE_GRID)
        .map(|k| k as f64 * 0.5 * fs / SOURCE_GRID as f64)
        .collect();
    let twin = preset
        .twin_noise(&grid, cfg.excess_noise, cfg.source_transmission)
        .map_err(|e| e.in_stage("source"))?;

    let chain = Chain {
        sample_rate: fs,
        detector: cfg.detector(),
        dc_cutoff: cfg.dc_block_cutoff,
        source: optional_delay(cfg.source_delay, fs)?,
        electronic: optional_delay(cfg.electronic_delay, fs)?,
        optical: if options.compensate_delay {
            optional_delay(cfg.optical_delay, fs)?
        } else {
            None
        },
    };
    let model = OutputModel {
        chain: &chain,
        eff,
        electronic_noise: cfg.electronic_noise_psd,
    };
    let fa = preset.analysis_frequency;
    let gain_quadratic = match options.gain_override {
        Some(g) => {
            if !g.is_finite() {
                return Err(Error::Domain(format!("gain override must be finite, got {g}")));
            }
            g * eff.detector_efficiency.sqrt()
        }
        None => {
            let (s, _, c) = twin.at(fa);
            model.optimal_gain(s, c, fa)
        }
    };
    let gain = AppliedGain {
        actuator: gain_quadratic / eff.probe_transmission.sqrt(),
        quadratic: gain_quadratic,
        published: gain_quadratic / eff.detector_efficiency.sqrt(),
    };

    let mut source_rng = stage_rng(cfg.rng_seed, STREAM_SOURCE);
    let (probe_src, conjugate) = synthesize_twin_traces(&twin, fs, n, &mut source_rng)
        .map_err(|e| e.in_stage("synthesize"))?;
    let probe_in = delay(&probe_src, cfg.source_delay)
        .map_err(|e| e.in_stage("probe_in"))?;
    drop(probe_src);

    let mut det_rng = stage_rng(cfg.rng_seed, STREAM_DETECTOR);
    let detected = detect(
        &conjugate,
        eff.detector_efficiency,
        &cfg.detector(),
        cfg.electronic_noise_psd,
        &mut det_rng,
    )
    .map_err(|e| e.in_stage("conjugate_detected"))?;
    let blocked = dc_block(&detected, cfg.dc_block_cutoff).map_err(|e| e.in_stage("control"))?;
    let control = delay(&blocked, cfg.electronic_delay)
        .map_err(|e| e.in_stage("control"))?
        .relabeled("control");
    drop(blocked);
    let probe_delayed = if options.compensate_delay {
        delay(&probe_in, cfg.optical_delay).map_err(|e| e.in_stage("probe_delayed"))?
    } else {
        probe_in.clone()
    }
    .relabeled("probe_delayed");
    let mut act_rng = stage_rng(cfg.rng_seed, STREAM_ACTUATOR);
    let probe_out = actuate_eom(&probe_delayed, &control, gain.actuator, eta_e, &mut act_rng)
        .map_err(|e| e.in_stage("probe_out"))?;

    // Drop filter edges and DC-block settling symmetrically.
    let longest = cfg.electronic_delay.max(cfg.optical_delay) + cfg.source_delay;
    let settle = if cfg.dc_block_cutoff > 0.0 {
        (5.0 * fs / (2.0 * PI * cfg.dc_block_cutoff)).ceil() as usize
    } else {
        0
    };
    let margin = (DELAY_HALF_TAPS + 2 + (longest * fs).ceil() as usize + settle).min(n / 10);
    let difference: Vec<f64> = probe_in
        .samples
        .iter()
        .zip(&conjugate.samples)
        .map(|(p, c)| (p - c) * std::f64::consts::FRAC_1_SQRT_2)
        .collect();
    let twin_difference = probe_in.with_samples("twin_difference", difference);

    let mut traces = BTreeMap::new();
    for t in [
        probe_in,
        conjugate,
        twin_difference,
        detected,
        control,
        probe_delayed,
        probe_out,
    ] {
        traces.insert(t.label.clone(), t.trimmed(margin));
    }

    let mut spectra = BTreeMap::new();
    for label in STAGES {
        let trace = &traces[label];
        let averages = match cfg.averages {
            Some(k) => k,
            None => spectral::available_averages(trace.len(), fs, cfg.rbw)?,
        };
        let raw = spectral::welch_psd(trace, cfg.rbw, averages).map_err(|e| e.in_stage(label))?;
        let mut reference = Vec::with_capacity(raw.len());
        let mut prediction = Vec::with_capacity(raw.len());
        for &f in &raw.frequencies {
            let (s, _, c) = twin.at(f);
            let hdet = chain.detector.transfer(f, fs).norm_sqr();
            let detected_noise = eff.detector_efficiency * s + 1.0 - eff.detector_efficiency
                + cfg.electronic_noise_psd / hdet;
            let (r, p) = match label {
                "probe_in" => (chain.source(f).norm_sqr(), s),
                "conjugate_in" => (1.0, s),
                "twin_difference" => {
                    let hs = chain.source(f);
                    (1.0, 0.5 * (hs.norm_sqr() * s + s) - c * hs.re)
                }
                "conjugate_detected" => (hdet, detected_noise),
                "control" => (chain.control(f).norm_sqr(), detected_noise),
                "probe_delayed" => (chain.probe(f).norm_sqr(), s),
                _ => (1.0, model.noise(s, c, gain_quadratic, f)),
            };
            reference.push(r);
            prediction.push(p);
        }
        let reference = SpectrumEstimate::analytic(raw.frequencies.clone(), reference, raw.rbw)
            .map_err(|e| e.in_stage(label))?;
        let estimate =
            spectral::normalize_to_shot(&raw, &reference).map_err(|e| e.in_stage(label))?;
        spectra.insert(
            label.to_string(),
            StageSpectrum {
                estimate,
                prediction,
            },
        );
    }

    let probe_arm = cfg.source_delay + if options.compensate_delay { cfg.optical_delay } else { 0.0 };
    Ok(RunResult {
        traces,
        spectra,
        config_echo: RunEcho {
            preset: preset.clone(),
            config: cfg.clone(),
            options: options.clone(),
        },
        rng_seed_used: cfg.rng_seed,
        gain,
        efficiencies: eff,
        residual_delay: probe_arm - cfg.electronic_delay,
        twin,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fwm_source::preset;
    use crate::noise_model::NormalizedSpectrum;
    use crate::spectral::{squeezing_at, welch_csd, welch_psd};
    use approx::assert_relative_eq;

    const FS: f64 = 50e6;

    fn flat_twin(s: f64, d: f64) -> TwinBeamNoise {
        let grid = vec![1e3, 25e6];
        TwinBeamNoise::new(
            NormalizedSpectrum::flat(grid.clone(), s).unwrap(),
            NormalizedSpectrum::flat(grid, d).unwrap(),
        )
        .unwrap()
    }

    fn mean_db(est: &SpectrumEstimate, lo: f64, hi: f64) -> f64 {
        let bins = est.bins_between(lo, hi);
        let n = bins.len() as f64;
        10.0 * (est.psd[bins].iter().sum::<f64>() / n).log10()
    }

    fn all_averages(t: &PhotocurrentTrace, rbw: f64) -> usize {
        spectral::available_averages(t.len(), t.sample_rate, rbw).unwrap()
    }

    #[test]
    fn synthesis_is_deterministic_and_symmetric() {
        let twin = flat_twin(5.4954, 0.18197);
        let (p1, c1) = synthesize_twin_traces(&twin, FS, 4096, &mut stage_rng(7, 1)).unwrap();
        let (p2, c2) = synthesize_twin_traces(&twin, FS, 4096, &mut stage_rng(7, 1)).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(c1, c2);
        let (p3, _) = synthesize_twin_traces(&twin, FS, 4096, &mut stage_rng(8, 1)).unwrap();
        assert_ne!(p1.samples, p3.samples);

        // Probe and conjugate have the same statistics.
        let (p, c) = synthesize_twin_traces(&twin, FS, 500_000, &mut stage_rng(3, 1)).unwrap();
        let k = all_averages(&p, 30e3);
        let sp = welch_psd(&p, 30e3, k).unwrap();
        let sc = welch_psd(&c, 30e3, k).unwrap();
        let a = mean_db(&sp, 200e3, 20e6);
        let b = mean_db(&sc, 200e3, 20e6);
        assert!((a - b).abs() < 0.05, "{a} vs {b}");
        assert!((a - 10.0 * 5.4954f64.log10()).abs() < 0.05);
        let pc = welch_csd(&p, &c, 30e3, k).unwrap();
        let cp = welch_csd(&c, &p, 30e3, k).unwrap();
        for (x, y) in pc.csd.iter().zip(&cp.csd) {
            assert_relative_eq!(x.re, y.re, max_relative = 1e-9);
        }
    }

    #[test]
    fn coherent_synthesis_gives_independent_white_traces() {
        let twin = TwinBeamNoise::coherent(vec![1e3, 25e6]).unwrap();
        let (p, c) = synthesize_twin_traces(&twin, FS, 1_000_000, &mut stage_rng(1, 1)).unwrap();
        let k = all_averages(&p, 30e3);
        let sp = welch_psd(&p, 30e3, k).unwrap();
        assert!(mean_db(&sp, 100e3, 24e6).abs() < 0.02);
        let sc = welch_psd(&c, 30e3, k).unwrap();
        let coh = welch_csd(&p, &c, 30e3, k).unwrap().coherence(&sp, &sc);
        let mean_coh = coh.iter().sum::<f64>() / coh.len() as f64;
        // Coherence of independent noise is of order 1/K.
        assert!(mean_coh < 5.0 / k as f64, "{mean_coh}");
    }

    #[test]
    fn off_resonance_difference_spectrum() {
        let p = preset("off_resonance").unwrap();
        let grid: Vec<f64> = (1..=400).map(|k| k as f64 * 62.5e3).collect();
        let twin = p.twin_noise(&grid, 0.0, 1.0).unwrap();
        let (a, b) = synthesize_twin_traces(&twin, FS, 2_000_000, &mut stage_rng(2, 1)).unwrap();
        let diff: Vec<f64> = a
            .samples
            .iter()
            .zip(&b.samples)
            .map(|(x, y)| (x - y) / 2f64.sqrt())
            .collect();
        let d = PhotocurrentTrace::new("d", FS, diff).unwrap();
        let est = welch_psd(&d, 30e3, all_averages(&d, 30e3)).unwrap();
        assert!(est.n_averages >= 200);
        let r = squeezing_at(&est, 360e3, 100e3).unwrap();
        assert!((r.db + 7.4).abs() < 0.3, "{}", r.db);
    }

    #[test]
    fn unphysical_cross_spectrum_cannot_be_built() {
        // C² > S² means S₋ > 2S, which the twin-beam type refuses, so the
        // synthesizer never sees a non-positive cross-spectral matrix.
        let grid = vec![1e3, 25e6];
        let r = TwinBeamNoise::new(
            NormalizedSpectrum::flat(grid.clone(), 1.0).unwrap(),
            NormalizedSpectrum::flat(grid, 2.5).unwrap(),
        );
        assert!(matches!(r, Err(Error::Model { .. })));
    }

    #[test]
    fn ideal_detection_is_identity() {
        let twin = flat_twin(3.0, 0.5);
        let (p, _) = synthesize_twin_traces(&twin, FS, 4096, &mut stage_rng(1, 1)).unwrap();
        let out = detect(&p, 1.0, &Detector::ideal(), 0.0, &mut stage_rng(1, 2)).unwrap();
        assert_eq!(out.samples, p.samples);
        assert!(matches!(
            detect(&p, 1.2, &Detector::ideal(), 0.0, &mut stage_rng(1, 2)),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn detection_loss_degrades_difference_squeezing() {
        let twin = flat_twin(5.4954, 0.18197);
        let n = 1_000_000;
        let (p, c) = synthesize_twin_traces(&twin, FS, n, &mut stage_rng(4, 1)).unwrap();
        let det = Detector::ideal();
        let pd = detect(&p, 0.95, &det, 0.0, &mut stage_rng(4, 2)).unwrap();
        let cd = detect(&c, 0.95, &det, 0.0, &mut stage_rng(4, 3)).unwrap();
        let diff: Vec<f64> = pd
            .samples
            .iter()
            .zip(&cd.samples)
            .map(|(x, y)| (x - y) / 2f64.sqrt())
            .collect();
        let d = PhotocurrentTrace::new("d", FS, diff).unwrap();
        let est = welch_psd(&d, 30e3, all_averages(&d, 30e3)).unwrap();
        let expected = 10.0 * (0.95 * 0.18197 + 0.05f64).log10();
        assert_relative_eq!(expected, -6.5195, epsilon = 1e-4);
        let got = mean_db(&est, 200e3, 20e6);
        assert!((got - expected).abs() < 0.05, "{got} vs {expected}");

        // Shot noise stays at shot noise through loss and roll-off.
        let coherent = flat_twin(1.0, 1.0);
        let (p, _) = synthesize_twin_traces(&coherent, FS, n, &mut stage_rng(5, 1)).unwrap();
        let lossy = detect(&p, 0.3, &det, 0.0, &mut stage_rng(5, 2)).unwrap();
        let est = welch_psd(&lossy, 30e3, all_averages(&lossy, 30e3)).unwrap();
        assert!(mean_db(&est, 200e3, 20e6).abs() < 0.03);
    }

    #[test]
    fn detector_responses() {
        let zp = Detector {
            bandwidth: 4e6,
            response: DetectorResponse::ZeroPhase,
        };
        assert_relative_eq!(zp.transfer(4e6, FS).norm_sqr(), 0.5, epsilon = 1e-12);
        assert_eq!(zp.transfer(4e6, FS).im, 0.0);
        let causal = Detector {
            bandwidth: 4e6,
            response: DetectorResponse::Causal,
        };
        assert_relative_eq!(causal.transfer(0.0, FS).re, 1.0, epsilon = 1e-12);
        // The causal filter magnitude follows its own discrete response.
        let twin = TwinBeamNoise::coherent(vec![1e3, 25e6]).unwrap();
        let (p, _) = synthesize_twin_traces(&twin, FS, 1_000_000, &mut stage_rng(6, 1)).unwrap();
        let out = detect(&p, 1.0, &causal, 0.0, &mut stage_rng(6, 2)).unwrap();
        let est = welch_psd(&out, 100e3, all_averages(&out, 100e3)).unwrap();
        let r = squeezing_at(&est, 4e6, 1e6).unwrap();
        let expected = 10.0 * causal.transfer(4e6, FS).norm_sqr().log10();
        assert!((r.db - expected).abs() < 0.1, "{} vs {expected}", r.db);
    }

    #[test]
    fn dc_block_examples() {
        let t = PhotocurrentTrace::new("dc", FS, vec![3.0; 200_000]).unwrap();
        let out = dc_block(&t, 10e3).unwrap();
        assert!(out.samples[199_999].abs() < 1e-12);
        assert_eq!(dc_block(&t, 0.0).unwrap(), t);
        // Attenuation at 360 kHz of a 10 kHz first-order high-pass.
        let db = 10.0 * dc_block_transfer(10e3, 360e3, FS).norm_sqr().log10();
        let analog = -10.0 * (1.0 + (10e3f64 / 360e3).powi(2)).log10();
        assert!(db.abs() < 0.01);
        assert_relative_eq!(db, analog, epsilon = 1e-4);
    }

    #[test]
    fn integer_delay_is_exact_shift() {
        let samples: Vec<f64> = (0..100).map(|i| (i as f64).sin()).collect();
        let t = PhotocurrentTrace::new("x", 1.0, samples.clone()).unwrap();
        assert_eq!(delay(&t, 0.0).unwrap(), t);
        let out = delay(&t, 5.0).unwrap();
        assert_eq!(&out.samples[5..], &samples[..95]);
        assert!(out.samples[..5].iter().all(|v| *v == 0.0));
        assert!(matches!(delay(&t, 100.0), Err(Error::Domain(_))));
    }

    #[test]
    fn fractional_delay_correlation_peak() {
        // Gaussian pulse: the cross-correlation is Gaussian, so a parabola
        // through the three log-samples around the peak is exact.
        let sigma: f64 = 4.0;
        let n = 512;
        let pulse: Vec<f64> = (0..n)
            .map(|i| (-(i as f64 - 200.0).powi(2) / (2.0 * sigma * sigma)).exp())
            .collect();
        let t = PhotocurrentTrace::new("pulse", 1.0, pulse.clone()).unwrap();
        for tau in [0.25, 3.25, 3.269, 7.9] {
            let out = delay(&t, tau).unwrap();
            let xcorr = |lag: i64| -> f64 {
                (0..n as i64)
                    .filter(|i| (0..n as i64).contains(&(i + lag)))
                    .map(|i| pulse[i as usize] * out.samples[(i + lag) as usize])
                    .sum()
            };
            let k = tau.round() as i64;
            let (a, b, c) = (xcorr(k - 1).ln(), xcorr(k).ln(), xcorr(k + 1).ln());
            let peak = k as f64 + 0.5 * (a - c) / (a - 2.0 * b + c);
            assert!((peak - tau).abs() < 0.01, "tau {tau}: peak {peak}");
        }
    }

    #[test]
    fn fractional_delay_group_delay_in_band() {
        let fd = FractionalDelay::new(3.269).unwrap();
        for i in 1..=35 {
            let f = 0.01 * i as f64;
            let h = fd.transfer(f, 1.0);
            let dh = fd.transfer(f + 1e-6, 1.0);
            let group = -(dh / h).arg() / (2.0 * PI * 1e-6);
            assert!((group - 3.269).abs() < 0.01, "f {f}: {group}");
            assert!((h.norm() - 1.0).abs() < 1e-3, "f {f}: |H| {}", h.norm());
        }
    }

    #[test]
    fn zero_gain_actuation_is_pure_loss() {
        let twin = flat_twin(5.4954, 0.18197);
        let (p, c) = synthesize_twin_traces(&twin, FS, 1_000_000, &mut stage_rng(9, 1)).unwrap();
        let out = actuate_eom(&p, &c, 0.0, 0.88, &mut stage_rng(9, 3)).unwrap();
        let est = welch_psd(&out, 30e3, all_averages(&out, 30e3)).unwrap();
        let expected = 10.0 * (0.88 * 5.4954 + 0.12f64).log10();
        assert!((mean_db(&est, 200e3, 20e6) - expected).abs() < 0.03);
        let short = PhotocurrentTrace::new("s", FS, vec![0.0; 10]).unwrap();
        assert!(matches!(
            actuate_eom(&p, &short, 1.0, 0.88, &mut stage_rng(9, 3)),
            Err(Error::Alignment(_))
        ));
    }

    #[test]
    fn perfect_cancellation_leaves_loss_vacuum() {
        let twin = flat_twin(5.4954, 0.18197);
        let (p, _) = synthesize_twin_traces(&twin, FS, 1_000_000, &mut stage_rng(10, 1)).unwrap();
        let g = -0.8;
        let control = p.with_samples("control", p.samples.iter().map(|x| -x / g).collect());
        let out = actuate_eom(&p, &control, g, 0.88, &mut stage_rng(10, 3)).unwrap();
        let est = welch_psd(&out, 30e3, all_averages(&out, 30e3)).unwrap();
        let lin = 10f64.powf(mean_db(&est, 200e3, 20e6) / 10.0);
        assert!((lin - 0.12).abs() < 0.12 * 0.01, "{lin}");
    }

    #[test]
    fn stage_vacua_are_independent() {
        let twin = TwinBeamNoise::coherent(vec![1e3, 25e6]).unwrap();
        let zero = PhotocurrentTrace::new("zero", FS, vec![0.0; 500_000]).unwrap();
        // Zero input isolates the injected vacuum of each stage.
        let v_det = detect(&zero, 0.5, &Detector::ideal(), 0.0, &mut stage_rng(11, STREAM_DETECTOR))
            .unwrap();
        let v_act = actuate_eom(&zero, &zero, 0.0, 0.5, &mut stage_rng(11, STREAM_ACTUATOR)).unwrap();
        let (v_src, _) =
            synthesize_twin_traces(&twin, FS, 500_000, &mut stage_rng(11, STREAM_SOURCE)).unwrap();
        let k = all_averages(&zero, 30e3);
        for (a, b) in [(&v_det, &v_act), (&v_det, &v_src), (&v_act, &v_src)] {
            let sa = welch_psd(a, 30e3, k).unwrap();
            let sb = welch_psd(b, 30e3, k).unwrap();
            let coh = welch_csd(a, b, 30e3, k).unwrap().coherence(&sa, &sb);
            let mean = coh.iter().sum::<f64>() / coh.len() as f64;
            assert!(mean < 5.0 / k as f64, "{} vs {}: {mean}", a.label, b.label);
        }
    }

    fn short_config(p: &ScenarioPreset) -> SimConfig {
        SimConfig {
            duration: 0.01,
            ..SimConfig::for_preset(p)
        }
    }

    #[test]
    fn run_is_deterministic() {
        let p = preset("off_resonance").unwrap();
        let cfg = SimConfig {
            duration: 0.002,
            ..SimConfig::for_preset(&p)
        };
        let a = run(&p, &cfg, &RunOptions::default()).unwrap();
        let b = run(&p, &cfg, &RunOptions::default()).unwrap();
        assert_eq!(a.traces, b.traces);
        assert_eq!(a.spectra, b.spectra);
        for label in STAGES {
            assert!(a.traces.contains_key(label));
            assert!(a.spectra.contains_key(label));
        }
    }

    #[test]
    fn compensated_run_tracks_prediction() {
        let p = preset("off_resonance").unwrap();
        let r = run(&p, &short_config(&p), &RunOptions::default()).unwrap();
        let out = &r.spectra["probe_out"];
        let got = squeezing_at(&out.estimate, 360e3, 100e3).unwrap();
        let bins = out.estimate.bins_between(310e3, 410e3);
        let predicted =
            10.0 * (out.prediction[bins.clone()].iter().sum::<f64>() / bins.len() as f64).log10();
        assert!((got.db - predicted).abs() < 0.3, "{} vs {predicted}", got.db);
        assert!(r.residual_delay.abs() < 1e-9);
    }

    #[test]
    fn uncompensated_run_oscillates() {
        let p = preset("off_resonance").unwrap();
        let opts = RunOptions {
            compensate_delay: false,
            ..RunOptions::default()
        };
        let cfg = SimConfig {
            duration: 0.04,
            ..SimConfig::for_preset(&p)
        };
        let r = run(&p, &cfg, &opts).unwrap();
        let out = &r.spectra["probe_out"].estimate;
        let shape = crate::spectral::EnvelopeShape {
            detector_bandwidth: Some(p.detector_bandwidth),
            source_bandwidth: Some(p.squeezing_bandwidth),
        };
        let fit = crate::spectral::fit_delay_oscillation_shaped(out, 0.2e6, 20e6, &shape).unwrap();
        assert_relative_eq!(fit.period, 1.0 / 65e-9, max_relative = 0.02);
        // Feedforward adds noise where the control is out of phase.
        let peak = squeezing_at(out, 0.5 / 65e-9, 400e3).unwrap().linear;
        let start = squeezing_at(out, 360e3, 100e3).unwrap().linear;
        assert!(peak > 5.0 * start, "{peak} vs {start}");
        assert_relative_eq!(r.residual_delay, -65e-9, epsilon = 1e-15);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let p = preset("off_resonance").unwrap();
        let base = SimConfig::for_preset(&p);
        for cfg in [
            SimConfig {
                sample_rate: 6e6,
                ..base.clone()
            },
            SimConfig {
                electronic_delay: -1.0,
                ..base.clone()
            },
            SimConfig {
                duration: 10.0,
                ..base.clone()
            },
            SimConfig {
                dc_block_cutoff: 5e6,
                ..base.clone()
            },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Domain(_))), "{cfg:?}");
        }
    }
}
