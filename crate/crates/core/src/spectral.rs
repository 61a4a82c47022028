//! Spectrum-analyzer emulation.
//!
//! Resolution bandwidth maps to the Welch segment length through the
//! window's equivalent noise bandwidth; video-bandwidth smoothing and trace
//! averaging are folded into a single segment-average count. Estimates are
//! one-sided, Hann-windowed, with 50% segment overlap.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feedforward_sim::PhotocurrentTrace;
use crate::noise_model::NormalizedSpectrum;

/// Equivalent noise bandwidth of the periodic Hann window, in bins.
pub const HANN_ENBW_BINS: f64 = 1.5;

/// A one-sided power spectral density estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumEstimate {
    pub frequencies: Vec<f64>,
    pub psd: Vec<f64>,
    /// Effective resolution bandwidth (Hz).
    pub rbw: f64,
    pub n_averages: usize,
    /// Relative variance `var(psd)/psd²` per bin.
    pub estimator_variance: Vec<f64>,
    /// Variance inflation when averaging adjacent bins, from window overlap
    /// in frequency: `1 + 2·Σ_m ρ_m`.
    pub bin_correlation: f64,
}

impl SpectrumEstimate {
    /// An exact (zero-variance) spectrum, such as an analytic shot-noise
    /// reference.
    pub fn analytic(frequencies: Vec<f64>, psd: Vec<f64>, rbw: f64) -> Result<Self> {
        let n = frequencies.len();
        let est = Self {
            frequencies,
            psd,
            rbw,
            n_averages: 0,
            estimator_variance: vec![0.0; n],
            bin_correlation: 1.0,
        };
        est.validate()?;
        Ok(est)
    }

    fn validate(&self) -> Result<()> {
        if self.psd.len() != self.frequencies.len()
            || self.estimator_variance.len() != self.frequencies.len()
        {
            return Err(Error::Grid("spectrum estimate members differ in length".into()));
        }
        if let Some((i, p)) = self
            .psd
            .iter()
            .enumerate()
            .find(|(_, p)| !p.is_finite() || **p <= 0.0)
        {
            return Err(Error::Domain(format!(
                "PSD {p} at {:.1} Hz is not positive; zero or invalid input trace",
                self.frequencies[i]
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.psd.len()
    }

    pub fn is_empty(&self) -> bool {
        self.psd.is_empty()
    }

    pub fn to_normalized(&self) -> Result<NormalizedSpectrum> {
        NormalizedSpectrum::new(self.frequencies.clone(), self.psd.clone())
    }

    pub fn std_dev(&self, bin: usize) -> f64 {
        self.psd[bin] * self.estimator_variance[bin].sqrt()
    }

    /// Indices of bins inside `[f_low, f_high]`.
    pub fn bins_between(&self, f_low: f64, f_high: f64) -> std::ops::Range<usize> {
        let lo = self.frequencies.partition_point(|&f| f < f_low);
        let hi = self.frequencies.partition_point(|&f| f <= f_high);
        lo..hi.max(lo)
    }
}

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 * (1.0 - (2.0 * PI * i as f64 / n as f64).cos()))
        .collect()
}

/// Segment length giving `rbw` with a Hann window at `sample_rate`.
pub fn segment_length(sample_rate: f64, rbw: f64) -> Result<usize> {
    if !(rbw > 0.0) || !(sample_rate > 0.0) {
        return Err(Error::Domain(format!(
            "rbw ({rbw}) and sample rate ({sample_rate}) must be > 0"
        )));
    }
    let n = (HANN_ENBW_BINS * sample_rate / rbw).round() as usize;
    if n < 8 {
        return Err(Error::Domain(format!(
            "rbw {rbw} Hz is too coarse for sample rate {sample_rate} Hz"
        )));
    }
    Ok(n)
}

/// Number of 50%-overlapping segments available in `n_samples`.
pub fn available_averages(n_samples: usize, sample_rate: f64, rbw: f64) -> Result<usize> {
    let nseg = segment_length(sample_rate, rbw)?;
    if n_samples < nseg {
        return Ok(0);
    }
    Ok((n_samples - nseg) / (nseg / 2) + 1)
}

struct WelchPlan {
    nseg: usize,
    hop: usize,
    window: Vec<f64>,
    window_power: f64,
    overlap_corr: f64,
    bin_correlation: f64,
}

impl WelchPlan {
    fn new(trace_len: usize, sample_rate: f64, rbw: f64, n_averages: usize) -> Result<Self> {
        let nseg = segment_length(sample_rate, rbw)?;
        let hop = nseg / 2;
        if n_averages == 0 {
            return Err(Error::Domain("n_averages must be >= 1".into()));
        }
        let required = nseg + (n_averages - 1) * hop;
        if trace_len < required {
            return Err(Error::Length {
                message: format!(
                    "{n_averages} averages at rbw {rbw} Hz need {required} samples, trace has {trace_len}"
                ),
                required_duration: required as f64 / sample_rate,
            });
        }
        let window = hann(nseg);
        let window_power: f64 = window.iter().map(|w| w * w).sum();
        // Correlation of periodograms from segments half a segment apart.
        let lag: f64 = (0..nseg - hop).map(|i| window[i] * window[i + hop]).sum();
        let overlap_corr = (lag / window_power).powi(2);
        // Correlation between neighbouring frequency bins of one periodogram.
        let w2: Vec<f64> = window.iter().map(|w| w * w).collect();
        let mut bin_correlation = 1.0;
        for m in 1..4 {
            let c: Complex64 = w2
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    Complex64::from_polar(*v, -2.0 * PI * (m * i) as f64 / nseg as f64)
                })
                .sum();
            bin_correlation += 2.0 * (c.norm() / window_power).powi(2);
        }
        Ok(Self {
            nseg,
            hop,
            window,
            window_power,
            overlap_corr,
            bin_correlation,
        })
    }

    fn relative_variance(&self, n_averages: usize) -> f64 {
        let k = n_averages as f64;
        (1.0 + 2.0 * self.overlap_corr * (k - 1.0) / k) / k
    }

    fn frequencies(&self, sample_rate: f64) -> Vec<f64> {
        (1..=self.nseg / 2)
            .map(|k| k as f64 * sample_rate / self.nseg as f64)
            .collect()
    }

    /// Accumulates windowed segment spectra, handing each pair of bins to
    /// `sink`.
    fn run(
        &self,
        a: &[f64],
        b: Option<&[f64]>,
        n_averages: usize,
        mut sink: impl FnMut(usize, Complex64, Complex64),
    ) {
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(self.nseg);
        let mut buf_a = vec![Complex64::default(); self.nseg];
        let mut buf_b = vec![Complex64::default(); self.nseg];
        let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
        for seg in 0..n_averages {
            let start = seg * self.hop;
            for (i, slot) in buf_a.iter_mut().enumerate() {
                *slot = Complex64::new(a[start + i] * self.window[i], 0.0);
            }
            fft.process_with_scratch(&mut buf_a, &mut scratch);
            if let Some(b) = b {
                for (i, slot) in buf_b.iter_mut().enumerate() {
                    *slot = Complex64::new(b[start + i] * self.window[i], 0.0);
                }
                fft.process_with_scratch(&mut buf_b, &mut scratch);
            }
            for k in 1..=self.nseg / 2 {
                let xb = if b.is_some() { buf_b[k] } else { buf_a[k] };
                sink(k - 1, buf_a[k], xb);
            }
        }
    }

    fn scale(&self, k: usize, sample_rate: f64) -> f64 {
        // One-sided: double every bin except Nyquist.
        let one_sided = if 2 * (k + 1) == self.nseg { 1.0 } else { 2.0 };
        one_sided / (sample_rate * self.window_power)
    }
}

/// Welch PSD of a trace in the trace's units (shot noise reads 1.0).
pub fn welch_psd(trace: &PhotocurrentTrace, rbw: f64, n_averages: usize) -> Result<SpectrumEstimate> {
    let fs = trace.sample_rate;
    let plan = WelchPlan::new(trace.samples.len(), fs, rbw, n_averages)?;
    let nbins = plan.nseg / 2;
    let mut acc = vec![0.0; nbins];
    plan.run(&trace.samples, None, n_averages, |k, x, _| {
        acc[k] += x.norm_sqr();
    });
    let psd: Vec<f64> = acc
        .iter()
        .enumerate()
        .map(|(k, v)| v * plan.scale(k, fs) / n_averages as f64)
        .collect();
    let base_var = plan.relative_variance(n_averages);
    let estimator_variance = (0..nbins)
        .map(|k| if 2 * (k + 1) == plan.nseg { 2.0 * base_var } else { base_var })
        .collect();
    let est = SpectrumEstimate {
        frequencies: plan.frequencies(fs),
        psd,
        rbw: HANN_ENBW_BINS * fs / plan.nseg as f64,
        n_averages,
        estimator_variance,
        bin_correlation: plan.bin_correlation,
    };
    est.validate()?;
    Ok(est)
}

/// Welch cross-spectral density `⟨A·B*⟩` of two aligned traces.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossSpectrum {
    pub frequencies: Vec<f64>,
    pub csd: Vec<Complex64>,
    pub n_averages: usize,
}

impl CrossSpectrum {
    /// Magnitude-squared coherence against the two auto-spectra.
    pub fn coherence(&self, a: &SpectrumEstimate, b: &SpectrumEstimate) -> Vec<f64> {
        self.csd
            .iter()
            .zip(a.psd.iter().zip(&b.psd))
            .map(|(c, (pa, pb))| c.norm_sqr() / (pa * pb))
            .collect()
    }
}

pub fn welch_csd(
    a: &PhotocurrentTrace,
    b: &PhotocurrentTrace,
    rbw: f64,
    n_averages: usize,
) -> Result<CrossSpectrum> {
    if a.sample_rate != b.sample_rate || a.samples.len() != b.samples.len() {
        return Err(Error::Alignment(format!(
            "'{}' and '{}' differ in rate or length",
            a.label, b.label
        )));
    }
    let fs = a.sample_rate;
    let plan = WelchPlan::new(a.samples.len(), fs, rbw, n_averages)?;
    let mut acc = vec![Complex64::default(); plan.nseg / 2];
    plan.run(&a.samples, Some(&b.samples), n_averages, |k, x, y| {
        acc[k] += x * y.conj();
    });
    let csd = acc
        .iter()
        .enumerate()
        .map(|(k, v)| v * plan.scale(k, fs) / n_averages as f64)
        .collect();
    Ok(CrossSpectrum {
        frequencies: plan.frequencies(fs),
        csd,
        n_averages,
    })
}

fn check_same_grid(a: &SpectrumEstimate, b: &SpectrumEstimate) -> Result<()> {
    if a.frequencies != b.frequencies {
        return Err(Error::Grid(format!(
            "spectrum grids differ ({} vs {} bins)",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Pointwise ratio to a shot-noise reference.
pub fn normalize_to_shot(
    est: &SpectrumEstimate,
    shot_reference: &SpectrumEstimate,
) -> Result<SpectrumEstimate> {
    check_same_grid(est, shot_reference)?;
    let psd = est
        .psd
        .iter()
        .zip(&shot_reference.psd)
        .map(|(p, r)| p / r)
        .collect();
    let estimator_variance = est
        .estimator_variance
        .iter()
        .zip(&shot_reference.estimator_variance)
        .map(|(a, b)| a + b)
        .collect();
    let out = SpectrumEstimate {
        frequencies: est.frequencies.clone(),
        psd,
        rbw: est.rbw,
        n_averages: est.n_averages,
        estimator_variance,
        bin_correlation: est.bin_correlation,
    };
    out.validate()?;
    Ok(out)
}

/// Removes a dark (electronic-noise) spectrum taken with the same settings.
pub fn subtract_electronic(
    est: &SpectrumEstimate,
    dark: &SpectrumEstimate,
) -> Result<SpectrumEstimate> {
    check_same_grid(est, dark)?;
    let mut psd = Vec::with_capacity(est.len());
    let mut estimator_variance = Vec::with_capacity(est.len());
    for k in 0..est.len() {
        let (p, d) = (est.psd[k], dark.psd[k]);
        if d >= p {
            return Err(Error::Subtraction {
                bin: k,
                frequency: est.frequencies[k],
                dark: d,
                signal: p,
            });
        }
        let diff = p - d;
        let abs_var = est.estimator_variance[k] * p * p + dark.estimator_variance[k] * d * d;
        psd.push(diff);
        estimator_variance.push(abs_var / (diff * diff));
    }
    Ok(SpectrumEstimate {
        frequencies: est.frequencies.clone(),
        psd,
        rbw: est.rbw,
        n_averages: est.n_averages,
        estimator_variance,
        bin_correlation: est.bin_correlation.max(dark.bin_correlation),
    })
}

/// A noise level read off an estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Readout {
    pub frequency: f64,
    pub linear: f64,
    pub db: f64,
    pub std_error_db: f64,
    pub n_bins: usize,
}

/// Mean noise over `frequency ± span/2` in dB.
pub fn squeezing_at(est: &SpectrumEstimate, frequency: f64, span: f64) -> Result<Readout> {
    let (first, last) = match (est.frequencies.first(), est.frequencies.last()) {
        (Some(a), Some(b)) => (*a, *b),
        _ => return Err(Error::Range("empty estimate".into())),
    };
    let lo_f = frequency - 0.5 * span;
    let hi_f = frequency + 0.5 * span;
    if lo_f < first - 0.5 * est.rbw || hi_f > last + 0.5 * est.rbw {
        return Err(Error::Range(format!(
            "readout {frequency:.1} Hz ± {:.1} Hz (grid {first:.1}–{last:.1} Hz)",
            0.5 * span
        )));
    }
    let mut bins = est.bins_between(lo_f, hi_f);
    if bins.is_empty() {
        // Span narrower than a bin: take the nearest one.
        let k = est
            .frequencies
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - frequency).abs().total_cmp(&(b.1 - frequency).abs()))
            .map(|(k, _)| k)
            .unwrap_or(0);
        bins = k..k + 1;
    }
    let n = bins.len();
    let mean: f64 = est.psd[bins.clone()].iter().sum::<f64>() / n as f64;
    let abs_var: f64 = bins
        .clone()
        .map(|k| est.estimator_variance[k] * est.psd[k] * est.psd[k])
        .sum::<f64>()
        / (n * n) as f64;
    let inflation = est.bin_correlation.min(n as f64);
    let rel_se = (abs_var * inflation).sqrt() / mean;
    Ok(Readout {
        frequency,
        linear: mean,
        db: 10.0 * mean.log10(),
        std_error_db: 10.0 / std::f64::consts::LN_10 * rel_se,
        n_bins: n,
    })
}

/// Largest contiguous band with `psd + 1σ < 1`, as `(f_low, f_high)` bin
/// centres. `None` when no bin is squeezed.
pub fn squeezing_band(est: &SpectrumEstimate) -> Option<(f64, f64)> {
    let mut best: Option<(usize, usize)> = None;
    let mut start: Option<usize> = None;
    let squeezed = |k: usize| est.psd[k] + est.std_dev(k) < 1.0;
    for k in 0..=est.len() {
        let inside = k < est.len() && squeezed(k);
        match (inside, start) {
            (true, None) => start = Some(k),
            (false, Some(s)) => {
                if best.is_none_or(|(a, b)| k - s > b - a + 1) {
                    best = Some((s, k - 1));
                }
                start = None;
            }
            _ => {}
        }
    }
    best.map(|(a, b)| (est.frequencies[a], est.frequencies[b]))
}

/// Result of [`fit_delay_oscillation`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayFit {
    pub residual_delay: f64,
    /// Oscillation period in frequency, `1/τ` (Hz).
    pub period: f64,
    /// Fitted spectrum level at the low edge of the band.
    pub offset: f64,
    /// Oscillation amplitude where the envelope is 1 (zero frequency).
    pub amplitude: f64,
    pub phase: f64,
    /// Corner of the fitted single-pole envelope; `None` for a flat or a
    /// prescribed envelope.
    pub envelope_corner: Option<f64>,
    pub quality: FitQuality,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitQuality {
    pub r_squared: f64,
    /// F statistic of the oscillating model against the same model without
    /// oscillation.
    pub f_statistic: f64,
    pub rms_residual: f64,
    pub n_bins: usize,
}

/// F statistic below which no oscillation is reported.
pub const OSCILLATION_F_THRESHOLD: f64 = 25.0;

/// Known spectral shape of a feedforward output: a detector amplitude pole
/// `h = 1/√(1 + (Ω/Ω_d)²)` and a source Lorentzian `L = 1/(1 + (Ω/Ω_s)²)`.
///
/// The output noise is then exactly `a₀ + a₁·L + h²·(a₂ + a₃·L)` plus the
/// oscillation `h·L·B·cos(2πΩτ + φ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct EnvelopeShape {
    pub detector_bandwidth: Option<f64>,
    pub source_bandwidth: Option<f64>,
}

/// Smooth columns and the oscillation envelope of one candidate model.
struct Basis {
    smooth: Vec<Vec<f64>>,
    envelope: Vec<f64>,
}

impl Basis {
    fn single_pole(f: &[f64], u: f64) -> Self {
        if u == 0.0 {
            return Self {
                smooth: vec![vec![1.0; f.len()]],
                envelope: vec![1.0; f.len()],
            };
        }
        let h: Vec<f64> = f.iter().map(|x| 1.0 / (1.0 + (x * u).powi(2)).sqrt()).collect();
        Self {
            smooth: vec![vec![1.0; f.len()], h.iter().map(|v| v * v).collect()],
            envelope: h,
        }
    }

    fn shaped(f: &[f64], shape: &EnvelopeShape) -> Self {
        let pole = |corner: Option<f64>, x: f64| {
            corner.map_or(1.0, |c| 1.0 / (1.0 + (x / c).powi(2)))
        };
        let h2: Vec<f64> = f.iter().map(|&x| pole(shape.detector_bandwidth, x)).collect();
        let l: Vec<f64> = f.iter().map(|&x| pole(shape.source_bandwidth, x)).collect();
        let mut smooth = vec![vec![1.0; f.len()]];
        if shape.source_bandwidth.is_some() {
            smooth.push(l.clone());
        }
        if shape.detector_bandwidth.is_some() {
            smooth.push(h2.clone());
            if shape.source_bandwidth.is_some() {
                smooth.push(h2.iter().zip(&l).map(|(a, b)| a * b).collect());
            }
        }
        let envelope = h2.iter().zip(&l).map(|(a, b)| a.sqrt() * b).collect();
        Self { smooth, envelope }
    }

    fn width(&self) -> usize {
        self.smooth.len() + 2
    }
}

/// Orthonormal basis of a model's smooth columns and the data's component
/// orthogonal to it.
struct Projection {
    q: Vec<Vec<f64>>,
    p_perp: Vec<f64>,
    pp_perp: f64,
}

impl Projection {
    fn new(basis: &Basis, p: &[f64]) -> Self {
        let n = p.len();
        let m = basis.smooth.len();
        let x = DMatrix::from_fn(n, m, |i, j| basis.smooth[j][i]);
        let svd = x.svd(true, false);
        let u = svd.u.expect("requested U");
        let smax = svd.singular_values.max();
        let q: Vec<Vec<f64>> = (0..m)
            .filter(|&j| svd.singular_values[j] > 1e-10 * smax)
            .map(|j| u.column(j).iter().copied().collect())
            .collect();
        let mut p_perp = p.to_vec();
        for col in &q {
            let dot: f64 = col.iter().zip(p).map(|(a, b)| a * b).sum();
            for (v, c) in p_perp.iter_mut().zip(col) {
                *v -= dot * c;
            }
        }
        let pp_perp = p_perp.iter().map(|v| v * v).sum();
        Self { q, p_perp, pp_perp }
    }
}

struct Band<'a> {
    f: &'a [f64],
    p: Vec<f64>,
    /// Sum of squares of the normalized data.
    pp: f64,
}

impl Band<'_> {
    /// Residual sum of squares with oscillation columns `(env·cos, env·sin)`
    /// after projecting out the smooth columns; fast, used for scanning.
    fn scan_rss(&self, proj: &Projection, basis: &Basis, c: &[f64], s: &[f64]) -> Option<f64> {
        let m = proj.q.len();
        let (mut xx, mut xy, mut yy, mut xp, mut yp) = (0.0, 0.0, 0.0, 0.0, 0.0);
        let mut qx = vec![0.0; m];
        let mut qy = vec![0.0; m];
        for i in 0..self.p.len() {
            let x = basis.envelope[i] * c[i];
            let y = basis.envelope[i] * s[i];
            xx += x * x;
            xy += x * y;
            yy += y * y;
            xp += x * proj.p_perp[i];
            yp += y * proj.p_perp[i];
            for (j, q) in proj.q.iter().enumerate() {
                qx[j] += q[i] * x;
                qy[j] += q[i] * y;
            }
        }
        for j in 0..m {
            xx -= qx[j] * qx[j];
            xy -= qx[j] * qy[j];
            yy -= qy[j] * qy[j];
        }
        let det = xx * yy - xy * xy;
        if !(det > 1e-12 * (xx * yy).max(f64::MIN_POSITIVE)) {
            return None;
        }
        let explained = (yy * xp * xp - 2.0 * xy * xp * yp + xx * yp * yp) / det;
        Some((proj.pp_perp - explained).max(0.0))
    }

    /// SVD least squares with an explicit residual; accurate when columns
    /// are nearly collinear.
    fn solve(&self, columns: &[&[f64]]) -> Option<(f64, Vec<f64>)> {
        let n = self.p.len();
        let x = DMatrix::from_fn(n, columns.len(), |i, j| columns[j][i]);
        let p = DVector::from_column_slice(&self.p);
        let coef = x.clone().svd(true, true).solve(&p, 1e-12).ok()?;
        let rss = (&x * &coef - &p).norm_squared();
        Some((rss, coef.as_slice().to_vec()))
    }

    fn oscillating(&self, basis: &Basis, tau: f64) -> Option<(f64, Vec<f64>)> {
        let (c, s): (Vec<f64>, Vec<f64>) = self
            .f
            .iter()
            .zip(&basis.envelope)
            .map(|(f, e)| {
                let (s, c) = (2.0 * PI * f * tau).sin_cos();
                (e * c, e * s)
            })
            .unzip();
        let mut cols: Vec<&[f64]> = basis.smooth.iter().map(|v| v.as_slice()).collect();
        cols.push(&c);
        cols.push(&s);
        self.solve(&cols)
    }

    fn smooth(&self, basis: &Basis) -> Option<f64> {
        let mut cols: Vec<&[f64]> = basis.smooth.iter().map(|v| v.as_slice()).collect();
        cols.push(&basis.envelope);
        self.solve(&cols).map(|r| r.0)
    }
}

/// Envelope candidates of the free-corner model: single-pole corners from
/// `f_max/40` to `10·f_max`, plus a flat envelope (`u = 1/corner = 0`).
fn corner_grid(f_max: f64) -> Vec<f64> {
    let n = 24;
    let (lo, hi) = ((f_max / 40.0).ln(), (10.0 * f_max).ln());
    std::iter::once(0.0)
        .chain((0..n).map(|i| 1.0 / (lo + (hi - lo) * i as f64 / (n - 1) as f64).exp()))
        .collect()
}

/// Fits `psd ≈ A + A₂·h² + B·h·cos(2πΩτ + φ)` over `[f_min, f_max]`, where
/// `h = 1/√(1 + (Ω/Ω_c)²)` is a single-pole envelope with a free corner
/// (a flat envelope, `h = 1`, is included).
///
/// Fails when the band holds too few bins or when the oscillating model is
/// not significantly better than the same model without oscillation.
pub fn fit_delay_oscillation(est: &SpectrumEstimate, f_min: f64, f_max: f64) -> Result<DelayFit> {
    fit(est, f_min, f_max, None)
}

/// Like [`fit_delay_oscillation`] with the envelope fixed to a known
/// detector and source response; removes the bias a mismatched envelope
/// causes when the band holds only a period or two.
pub fn fit_delay_oscillation_shaped(
    est: &SpectrumEstimate,
    f_min: f64,
    f_max: f64,
    shape: &EnvelopeShape,
) -> Result<DelayFit> {
    for c in [shape.detector_bandwidth, shape.source_bandwidth].into_iter().flatten() {
        if !(c > 0.0) {
            return Err(Error::Domain(format!("envelope corner must be > 0, got {c}")));
        }
    }
    fit(est, f_min, f_max, Some(shape))
}

fn fit(
    est: &SpectrumEstimate,
    f_min: f64,
    f_max: f64,
    shape: Option<&EnvelopeShape>,
) -> Result<DelayFit> {
    if !(f_max > f_min) {
        return Err(Error::Domain(format!("empty fit band {f_min}–{f_max} Hz")));
    }
    let bins = est.bins_between(f_min, f_max);
    let n = bins.len();
    if n < 16 {
        return Err(Error::Fit(format!("only {n} bins in the fit band")));
    }
    let freqs = &est.frequencies[bins.clone()];
    let raw = &est.psd[bins];
    let scale = raw.iter().sum::<f64>() / n as f64;
    let p: Vec<f64> = raw.iter().map(|v| v / scale).collect();
    let pp = p.iter().map(|v| v * v).sum();
    let band = Band { f: freqs, p, pp };
    let span = freqs[n - 1] - freqs[0];
    let df = span / (n - 1) as f64;
    let tau_min = 0.5 / span;
    let tau_max = (1.0 / (6.0 * df)).max(2.0 * tau_min);
    let tau_step = 1.0 / (16.0 * span);

    let corners = match shape {
        Some(_) => vec![0.0],
        None => corner_grid(freqs[n - 1]),
    };
    let basis_for = |u: f64| match shape {
        Some(s) => Basis::shaped(freqs, s),
        None => Basis::single_pole(freqs, u),
    };
    let bases: Vec<Basis> = corners.iter().map(|&u| basis_for(u)).collect();
    let projections: Vec<Projection> = bases.iter().map(|b| Projection::new(b, &band.p)).collect();

    // Coarse scan over τ and the envelope candidates.
    let mut best = (f64::INFINITY, tau_min, 0.0);
    let mut c = vec![0.0; n];
    let mut s = vec![0.0; n];
    let steps = ((tau_max - tau_min) / tau_step).ceil() as usize;
    for step in 0..=steps {
        let tau = tau_min + step as f64 * tau_step;
        for i in 0..n {
            let (si, ci) = (2.0 * PI * freqs[i] * tau).sin_cos();
            c[i] = ci;
            s[i] = si;
        }
        for ((u, basis), proj) in corners.iter().zip(&bases).zip(&projections) {
            if let Some(rss) = band.scan_rss(proj, basis, &c, &s) {
                if rss < best.0 {
                    best = (rss, tau, *u);
                }
            }
        }
    }
    if !best.0.is_finite() {
        return Err(Error::Fit("least-squares system is singular".into()));
    }

    // Pattern search in (τ, ln u); the flat envelope stays a candidate.
    let free_corner = shape.is_none();
    let (_, mut tau, mut u) = best;
    let mut rss = band
        .oscillating(&basis_for(u), tau)
        .map_or(f64::INFINITY, |r| r.0);
    let mut dtau = tau_step;
    let mut dlog = 0.3;
    while dtau > 1e-6 * tau {
        let mut improved = (rss, tau, u);
        let mut candidates = vec![u];
        if free_corner {
            candidates.push(0.0);
            if u > 0.0 {
                candidates.extend((-3i32..=3).map(|b| u * (b as f64 * dlog / 3.0).exp()));
            }
        }
        let candidate_bases: Vec<(f64, Basis)> =
            candidates.iter().map(|&uu| (uu, basis_for(uu))).collect();
        for a in -3i32..=3 {
            let t = tau + a as f64 * dtau / 3.0;
            if t < tau_min {
                continue;
            }
            for (uu, basis) in &candidate_bases {
                if let Some((r, _)) = band.oscillating(basis, t) {
                    if r < improved.0 {
                        improved = (r, t, *uu);
                    }
                }
            }
        }
        (rss, tau, u) = improved;
        dtau /= 3.0;
        dlog /= 3.0;
    }
    let basis = basis_for(u);
    let (rss, coef) = band
        .oscillating(&basis, tau)
        .ok_or_else(|| Error::Fit("singular system at the optimum".into()))?;

    // The same model without oscillation, over the same envelope family.
    let rss_smooth = if free_corner {
        let mut r = bases.iter().filter_map(|b| band.smooth(b)).fold(f64::INFINITY, f64::min);
        if let Some(v) = band.smooth(&basis) {
            r = r.min(v);
        }
        r
    } else {
        band.smooth(&basis).unwrap_or(f64::INFINITY)
    };
    let dof = n.saturating_sub(basis.width() + 2).max(1) as f64;
    let improvement = rss_smooth - rss;
    let f_stat = if improvement <= 1e-12 * band.pp {
        0.0
    } else {
        (improvement / 2.0) / (rss.max(1e-300 * band.pp) / dof)
    };
    let mean = band.p.iter().sum::<f64>() / n as f64;
    let tss: f64 = band.p.iter().map(|v| (v - mean).powi(2)).sum();
    let quality = FitQuality {
        r_squared: if tss > 0.0 { 1.0 - rss / tss } else { 0.0 },
        f_statistic: f_stat,
        rms_residual: (rss / n as f64).sqrt() * scale,
        n_bins: n,
    };
    let m = basis.smooth.len();
    let (bc, bs) = (coef[m], coef[m + 1]);
    let amplitude = (bc * bc + bs * bs).sqrt() * scale;
    let at_boundary = tau <= tau_min + 0.5 * tau_step;
    if !(f_stat > OSCILLATION_F_THRESHOLD) || at_boundary || amplitude == 0.0 {
        return Err(Error::Fit(format!(
            "no detectable oscillation between {f_min:.0} and {f_max:.0} Hz \
             (F = {f_stat:.2}, amplitude = {amplitude:.3e}, best τ = {:.2} ns)",
            tau * 1e9
        )));
    }
    let offset: f64 = basis
        .smooth
        .iter()
        .zip(&coef)
        .map(|(col, k)| col[0] * k)
        .sum::<f64>()
        * scale;
    Ok(DelayFit {
        residual_delay: tau,
        period: 1.0 / tau,
        offset,
        amplitude,
        phase: (-bs).atan2(bc),
        envelope_corner: if free_corner && u > 0.0 { Some(1.0 / u) } else { None },
        quality,
    })
}
