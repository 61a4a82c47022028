//! The subcommands, each producing a [`RunReport`].

use ffsqueeze::feedforward_sim::{run, Actuator, RunResult, StageSpectrum, STAGES};
use ffsqueeze::fwm_source::{self, DISPLACEMENT_TRANSMISSION, SPEED_OF_LIGHT};
use ffsqueeze::noise_model::{
    ideal_limit, noise_with_gain, optimal_gain_value, predict_optimal_noise, to_db,
    ChannelEfficiencies, GainConvention, GainProfile,
};
use ffsqueeze::spectral::{
    fit_delay_oscillation_shaped, squeezing_at, squeezing_band, DelayFit, EnvelopeShape,
    SpectrumEstimate,
};

use crate::config::Resolved;
use crate::report::{Check, RunReport, SpectrumRow, SummaryRow};
use crate::CliError;

/// Analytic curves are tabulated on this grid (Hz).
const PREDICT_STEP: f64 = 10e3;
const PREDICT_POINTS: usize = 2000;

/// Relative tolerance on a recovered delay-line length.
const LENGTH_TOLERANCE: f64 = 0.02;

fn db(linear: f64) -> Result<f64, CliError> {
    Ok(to_db(linear)?)
}

fn efficiencies(cfg: &Resolved) -> Result<ChannelEfficiencies, CliError> {
    let eta_e = match cfg.options.variant {
        Actuator::Eom => cfg.preset.eta_e,
        Actuator::Displacement => DISPLACEMENT_TRANSMISSION,
    };
    Ok(ChannelEfficiencies::new(eta_e, cfg.preset.eta_d)?)
}

fn new_report(command: &str, cfg: &Resolved, seed: Option<u64>) -> RunReport {
    RunReport::new(command, &cfg.preset.name, seed, cfg.echo())
}

/// Prediction anchor of the displacement variant of this scenario, when one
/// is published and this configuration is not already that variant.
fn displacement_anchor(cfg: &Resolved) -> Option<f64> {
    if !cfg.anchors_apply || cfg.options.variant == Actuator::Displacement {
        return None;
    }
    fwm_source::preset(&format!("{}_displacement", cfg.preset.name))
        .ok()
        .and_then(|p| p.anchors.predicted_db)
}

pub fn cmd_predict(cfg: &Resolved) -> Result<RunReport, CliError> {
    let p = &cfg.preset;
    let fa = p.analysis_frequency;
    let eff = efficiencies(cfg)?;
    let mut grid: Vec<f64> = (1..=PREDICT_POINTS).map(|k| k as f64 * PREDICT_STEP).collect();
    if !grid.contains(&fa) {
        grid.push(fa);
        grid.sort_by(f64::total_cmp);
    }
    let twin = p.twin_noise(&grid, cfg.sim.excess_noise, cfg.sim.source_transmission)?;
    let optimal = predict_optimal_noise(&twin, &eff)?;
    let limit = ideal_limit(twin.intensity_difference());

    let (s, sm, _) = twin.at(fa);
    let g_published = optimal_gain_value(s, sm, &eff, GainConvention::Published);
    let g_quadratic = match cfg.options.gain_override {
        Some(g) => g * eff.detector_efficiency.sqrt(),
        None => optimal_gain_value(s, sm, &eff, GainConvention::Quadratic),
    };
    let fixed = GainProfile::flat(grid.clone(), g_quadratic)?;
    let compensated_delay = (cfg.optical_delay() + cfg.sim.source_delay - cfg.sim.electronic_delay).abs();
    let uncompensated_delay = (cfg.sim.source_delay - cfg.sim.electronic_delay).abs();
    let fixed_comp = noise_with_gain(&twin, &eff, &fixed, compensated_delay)?;
    let fixed_uncomp = noise_with_gain(&twin, &eff, &fixed, uncompensated_delay)?;

    let displaced = ChannelEfficiencies::new(DISPLACEMENT_TRANSMISSION, eff.detector_efficiency)?;
    let displaced_at = predict_optimal_noise(&twin.resample(vec![fa])?, &displaced)?.values()[0];

    let mut report = new_report("predict", cfg, None);
    let anchors = &p.anchors;
    let at = |curve: &ffsqueeze::noise_model::NormalizedSpectrum| curve.interpolate(fa);
    let sf_db = db(at(&optimal))?;
    let rows = [
        ("twin_difference", db(sm)?, anchors.intensity_difference_db),
        ("probe_out_optimal", sf_db, anchors.predicted_db),
        ("ideal_limit", db(at(&limit))?, None),
        ("probe_out_fixed_gain_compensated", db(at(&fixed_comp))?, None),
        ("probe_out_fixed_gain_uncompensated", db(at(&fixed_uncomp))?, None),
        ("probe_out_displacement", db(displaced_at)?, displacement_anchor(cfg)),
    ];
    for (stage, predicted_db, anchor_db) in rows {
        report.summary.push(SummaryRow {
            stage: stage.to_string(),
            frequency_hz: fa,
            predicted_db,
            simulated_db: None,
            anchor_db,
            deviation_db: None,
        });
    }

    report.push_quantity("optimal_gain_published", g_published, "", None);
    report.push_quantity("applied_gain_published", g_quadratic / eff.detector_efficiency.sqrt(), "", None);
    report.push_quantity("predicted_noise_db", sf_db, "dB", anchors.predicted_db);
    report.push_quantity("ideal_limit_db", db(at(&limit))?, "dB", None);
    report.push_quantity("displacement_noise_db", db(displaced_at)?, "dB", displacement_anchor(cfg));
    report.push_quantity("displacement_improvement_db", sf_db - db(displaced_at)?, "dB", None);
    if cfg.sim.electronic_delay > 0.0 {
        report.push_quantity("oscillation_period_hz", 1.0 / cfg.sim.electronic_delay, "Hz", None);
    }
    report.push_quantity(
        "delay_line_length_m",
        SPEED_OF_LIGHT * cfg.sim.electronic_delay,
        "m",
        anchors.delay_line_length_m,
    );

    let curves = [
        ("single_beam", twin.single_beam().values().to_vec()),
        ("twin_difference", twin.intensity_difference().values().to_vec()),
        ("probe_out_optimal", optimal.values().to_vec()),
        ("ideal_limit", limit.values().to_vec()),
        ("probe_out_fixed_gain_compensated", fixed_comp.values().to_vec()),
        ("probe_out_fixed_gain_uncompensated", fixed_uncomp.values().to_vec()),
    ];
    for (stage, values) in curves {
        for (f, v) in grid.iter().zip(values) {
            let d = db(v)?;
            report.spectra.push(SpectrumRow {
                stage: stage.to_string(),
                frequency_hz: *f,
                psd_linear: v,
                psd_db: d,
                prediction_db: d,
                deviation_db: 0.0,
            });
        }
    }
    report
        .notes
        .push("fixed-gain curves hold the gain at its analysis-frequency value and ignore the detector roll-off".into());
    Ok(report)
}

/// Mean of the per-bin prediction over the bins a readout averages.
fn predicted_readout(est: &SpectrumEstimate, prediction: &[f64], f: f64, span: f64) -> f64 {
    let bins = est.bins_between(f - 0.5 * span, f + 0.5 * span);
    if bins.is_empty() {
        let k = est
            .frequencies
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - f).abs().total_cmp(&(b.1 - f).abs()))
            .map_or(0, |(k, _)| k);
        return prediction[k];
    }
    let n = bins.len() as f64;
    prediction[bins].iter().sum::<f64>() / n
}

struct StageReadout {
    simulated_db: f64,
    predicted_db: f64,
    std_error_db: f64,
}

fn readout(stage: &StageSpectrum, f: f64, span: f64) -> Result<StageReadout, CliError> {
    let r = squeezing_at(&stage.estimate, f, span)?;
    Ok(StageReadout {
        simulated_db: r.db,
        predicted_db: db(predicted_readout(&stage.estimate, &stage.prediction, f, span))?,
        std_error_db: r.std_error_db,
    })
}

fn push_spectrum(report: &mut RunReport, label: &str, stage: &StageSpectrum) -> Result<(), CliError> {
    let est = &stage.estimate;
    for k in 0..est.len() {
        let sim = est.psd[k];
        let psd_db = db(sim)?;
        let prediction_db = db(stage.prediction[k])?;
        report.spectra.push(SpectrumRow {
            stage: label.to_string(),
            frequency_hz: est.frequencies[k],
            psd_linear: sim,
            psd_db,
            prediction_db,
            deviation_db: psd_db - prediction_db,
        });
    }
    Ok(())
}

/// Worst per-bin deviation between simulation and prediction over the band.
fn band_check(label: &str, stage: &StageSpectrum, cfg: &Resolved) -> Result<Check, CliError> {
    let a = &cfg.analysis;
    let est = &stage.estimate;
    let bins = est.bins_between(a.band_low, a.band_high);
    let mut worst = (0.0f64, a.band_low);
    for k in bins.clone() {
        let dev = db(est.psd[k])? - db(stage.prediction[k])?;
        if dev.abs() > worst.0.abs() {
            worst = (dev, est.frequencies[k]);
        }
    }
    let passed = !bins.is_empty() && worst.0.abs() <= a.tolerance_db;
    Ok(Check {
        name: "oracle_agreement".into(),
        stage: label.to_string(),
        frequency_hz: Some(worst.1),
        value: worst.0,
        limit: a.tolerance_db,
        passed,
        detail: format!(
            "worst deviation {:+.3} dB at {:.0} Hz over {} bins in {:.0}-{:.0} Hz (limit {:.2} dB)",
            worst.0,
            worst.1,
            bins.len(),
            a.band_low,
            a.band_high,
            a.tolerance_db
        ),
    })
}

fn probe_anchor(cfg: &Resolved, compensated: bool) -> Option<f64> {
    let a = &cfg.preset.anchors;
    if compensated {
        a.measured_compensated_db
    } else {
        a.measured_uncompensated_db
    }
}

fn push_gain(report: &mut RunReport, result: &RunResult) {
    report.push_quantity("applied_gain_published", result.gain.published, "", None);
    report.push_quantity("applied_gain_actuator", result.gain.actuator, "", None);
    report.push_quantity("residual_delay_s", result.residual_delay, "s", None);
}

pub fn cmd_simulate(cfg: &Resolved) -> Result<RunReport, CliError> {
    let result = run(&cfg.preset, &cfg.sim, &cfg.options)?;
    let fa = cfg.preset.analysis_frequency;
    let span = cfg.analysis.readout_span;
    let compensated = cfg.options.compensate_delay;
    let mut report = new_report("simulate", cfg, Some(result.rng_seed_used));

    for label in STAGES {
        let stage = &result.spectra[label];
        let r = readout(stage, fa, span)?;
        let anchor_db = match label {
            "twin_difference" => cfg.preset.anchors.intensity_difference_db,
            "probe_out" => probe_anchor(cfg, compensated),
            _ => None,
        };
        report.summary.push(SummaryRow {
            stage: label.to_string(),
            frequency_hz: fa,
            predicted_db: r.predicted_db,
            simulated_db: Some(r.simulated_db),
            anchor_db,
            deviation_db: Some(r.simulated_db - r.predicted_db),
        });
        report.checks.push(band_check(label, stage, cfg)?);
        push_spectrum(&mut report, label, stage)?;
    }

    let out = &result.spectra["probe_out"];
    let r = readout(out, fa, span)?;
    report.push_quantity("probe_out_noise_db", r.simulated_db, "dB", probe_anchor(cfg, compensated));
    report.push_quantity("probe_out_std_error_db", r.std_error_db, "dB", None);
    report.push_quantity("probe_out_prediction_db", r.predicted_db, "dB", None);
    push_gain(&mut report, &result);
    report.push_quantity("welch_averages", out.estimate.n_averages as f64, "", None);
    let band_anchor = cfg
        .preset
        .anchors
        .squeezing_band_hz
        .filter(|_| compensated && cfg.options.variant == Actuator::Eom);
    match squeezing_band(&out.estimate) {
        Some((lo, hi)) => {
            report.push_quantity("squeezing_band_low_hz", lo, "Hz", band_anchor.map(|b| b.0));
            report.push_quantity("squeezing_band_high_hz", hi, "Hz", band_anchor.map(|b| b.1));
        }
        None => report.notes.push("probe output is not squeezed at any frequency".into()),
    }
    Ok(report)
}

/// Envelope of the delay oscillation implied by the configured chain.
fn envelope_shape(cfg: &Resolved) -> EnvelopeShape {
    EnvelopeShape {
        detector_bandwidth: Some(cfg.sim.detector_bandwidth).filter(|b| b.is_finite()),
        source_bandwidth: cfg
            .preset
            .single_beam_db
            .is_none()
            .then_some(cfg.preset.squeezing_bandwidth),
    }
}

pub fn cmd_optimize_delay(cfg: &Resolved) -> Result<RunReport, CliError> {
    let fa = cfg.preset.analysis_frequency;
    let span = cfg.analysis.readout_span;
    let a = &cfg.analysis;
    let mut report = new_report("optimize-delay", cfg, Some(cfg.sim.rng_seed));
    let applied_delay = if cfg.options.compensate_delay {
        cfg.sim.optical_delay
    } else {
        0.0
    };

    let (initial, fit) = {
        let result = run(&cfg.preset, &cfg.sim, &cfg.options)?;
        let out = result.spectra["probe_out"].clone();
        let fit = fit_delay_oscillation_shaped(&out.estimate, a.fit_f_min, a.fit_f_max, &envelope_shape(cfg));
        push_gain(&mut report, &result);
        (out, fit)
    };
    let r = readout(&initial, fa, span)?;
    report.summary.push(SummaryRow {
        stage: "probe_out_initial".into(),
        frequency_hz: fa,
        predicted_db: r.predicted_db,
        simulated_db: Some(r.simulated_db),
        anchor_db: probe_anchor(cfg, cfg.options.compensate_delay),
        deviation_db: Some(r.simulated_db - r.predicted_db),
    });
    push_spectrum(&mut report, "probe_out_initial", &initial)?;

    let fit: DelayFit = match fit {
        Ok(fit) => fit,
        Err(ffsqueeze::Error::Fit(reason)) => {
            report.notes.push(format!("no oscillation detected ({reason})"));
            report.push_quantity("additional_delay_s", 0.0, "s", None);
            report.push_quantity("recommended_delay_s", applied_delay, "s", None);
            report.push_quantity("delay_line_length_m", SPEED_OF_LIGHT * applied_delay, "m", None);
            return Ok(report);
        }
        Err(e) => return Err(e.into()),
    };

    // The oscillation fixes |τ| only; the control is taken to lag the probe.
    let recommended = applied_delay + fit.residual_delay;
    let length = SPEED_OF_LIGHT * recommended;
    let length_anchor = cfg.preset.anchors.delay_line_length_m;
    report.push_quantity("fitted_residual_delay_s", fit.residual_delay, "s", None);
    report.push_quantity("oscillation_period_hz", fit.period, "Hz", None);
    report.push_quantity("fit_r_squared", fit.quality.r_squared, "", None);
    report.push_quantity("fit_f_statistic", fit.quality.f_statistic, "", None);
    report.push_quantity("fit_bins", fit.quality.n_bins as f64, "", None);
    report.push_quantity("additional_delay_s", fit.residual_delay, "s", None);
    report.push_quantity("recommended_delay_s", recommended, "s", None);
    report.push_quantity("delay_line_length_m", length, "m", length_anchor);
    if let Some(anchor) = length_anchor {
        let rel = length / anchor - 1.0;
        report.checks.push(Check {
            name: "delay_line_length".into(),
            stage: "probe_delayed".into(),
            frequency_hz: None,
            value: rel,
            limit: LENGTH_TOLERANCE,
            passed: rel.abs() <= LENGTH_TOLERANCE,
            detail: format!(
                "recovered {length:.3} m vs {anchor} m ({:+.2}%, limit {:.0}%)",
                100.0 * rel,
                100.0 * LENGTH_TOLERANCE
            ),
        });
    }

    let mut sim = cfg.sim.clone();
    sim.optical_delay = recommended;
    let options = ffsqueeze::feedforward_sim::RunOptions {
        compensate_delay: true,
        ..cfg.options.clone()
    };
    let recovered = run(&cfg.preset, &sim, &options)?;
    let out = &recovered.spectra["probe_out"];
    let r = readout(out, fa, span)?;
    let dev = r.simulated_db - r.predicted_db;
    report.summary.push(SummaryRow {
        stage: "probe_out_recovered".into(),
        frequency_hz: fa,
        predicted_db: r.predicted_db,
        simulated_db: Some(r.simulated_db),
        anchor_db: probe_anchor(cfg, true),
        deviation_db: Some(dev),
    });
    report.push_quantity("recovered_noise_db", r.simulated_db, "dB", probe_anchor(cfg, true));
    report.push_quantity("recovered_prediction_db", r.predicted_db, "dB", None);
    report.checks.push(Check {
        name: "recovered_squeezing".into(),
        stage: "probe_out_recovered".into(),
        frequency_hz: Some(fa),
        value: dev,
        limit: a.tolerance_db,
        passed: dev.abs() <= a.tolerance_db,
        detail: format!(
            "{:.3} dB simulated vs {:.3} dB predicted at {fa:.0} Hz ({dev:+.3} dB, limit {:.2} dB)",
            r.simulated_db, r.predicted_db, a.tolerance_db
        ),
    });
    push_spectrum(&mut report, "probe_out_recovered", out)?;
    Ok(report)
}
