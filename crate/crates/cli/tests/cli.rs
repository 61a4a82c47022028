use std::path::Path;
use std::process::{Command, Output};

use ffsqueeze_cli::config::{parse_config, Overrides};
use ffsqueeze_cli::report::{read_json, CSV_HEADER};

fn ffsqueeze(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ffsqueeze"))
        .args(args)
        .current_dir(dir)
        .env_remove("FFSQUEEZE_OUT_DIR")
        .env("SOURCE_DATE_EPOCH", "1700000000")
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.display().to_string()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn configuration_errors_exit_with_status_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.toml", "[noise_model]\neta_E = 1.2\n");
    let out = ffsqueeze(&["predict", "--config", &bad], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("eta_E must lie in (0,1]"), "{}", stderr(&out));

    let unknown = write(dir.path(), "unknown.toml", "[spectral]\nrbw = 3e4\nwindow = \"hann\"\n");
    let out = ffsqueeze(&["predict", "--config", &unknown], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("window"), "{}", stderr(&out));

    let out = ffsqueeze(&["predict", "--config", "missing.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn parse_config_applies_overrides_from_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "c.toml", "scenario = \"on_resonance\"\n[feedforward_sim]\nrng_seed = 4\n");
    let overrides = Overrides {
        averages: Some(250),
        ..Overrides::default()
    };
    let r = parse_config(Path::new(&path), &overrides).unwrap();
    assert_eq!(r.preset.name, "on_resonance");
    assert_eq!(r.sim.rng_seed, 4);
    assert_eq!(r.sim.averages, Some(250));
}

#[test]
fn predict_writes_both_formats_and_the_json_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let out = ffsqueeze(&["predict", "--scenario", "on_resonance"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let report = read_json(&dir.path().join("on_resonance_predict.json")).unwrap();
    assert_eq!(report.generated_at, "2023-11-14T22:13:20Z");
    let csv = std::fs::read_to_string(dir.path().join("on_resonance_predict.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some(CSV_HEADER));

    // Re-rendering the saved report reproduces both files.
    let again = dir.path().join("again");
    let input = dir.path().join("on_resonance_predict.json").display().to_string();
    let out = ffsqueeze(&["report", "--input", &input, "--out-dir", again.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(std::fs::read_to_string(again.join("on_resonance_predict.csv")).unwrap(), csv);
    assert_eq!(read_json(&again.join("on_resonance_predict.json")).unwrap(), report);
}

#[test]
fn deeper_source_squeezing_raises_the_ideal_limit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "s9.toml", "scenario = \"off_resonance\"\n[fwm_source]\ns_minus_db = -9.0\n");
    let out = ffsqueeze(&["predict", "--config", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let report = read_json(&dir.path().join("off_resonance_predict.json")).unwrap();
    let limit = report.quantity("ideal_limit_db").unwrap();
    assert!((limit.value - (-9.0 + 10.0 * 2f64.log10())).abs() < 1e-9, "{}", limit.value);
    // Anchors belong to the unmodified scenario only.
    assert!(report.quantities.iter().all(|q| q.anchor.is_none()));
}

#[test]
fn simulate_is_reproducible_from_its_echo() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let out = ffsqueeze(
        &["simulate", "--scenario", "coherent", "--duration", "0.02", "--seed", "11", "--out-dir", first.to_str().unwrap()],
        dir.path(),
    );
    assert!(matches!(out.status.code(), Some(0 | 1)), "{}", stderr(&out));
    let report = read_json(&first.join("coherent_simulate.json")).unwrap();
    assert_eq!(report.seed, Some(11));
    assert_eq!(report.checks.len(), 7);
    // Every failure names its stage, frequency and size.
    for c in report.checks.iter().filter(|c| !c.passed) {
        assert!(c.frequency_hz.is_some() && c.detail.contains("dB"), "{c:?}");
    }
    assert_eq!(out.status.code(), Some(if report.passed() { 0 } else { 1 }));

    let echo = write(dir.path(), "echo.toml", &report.config);
    let second = dir.path().join("second");
    let out = ffsqueeze(&["simulate", "--config", &echo, "--out-dir", second.to_str().unwrap()], dir.path());
    assert!(matches!(out.status.code(), Some(0 | 1)), "{}", stderr(&out));
    let a = std::fs::read(first.join("coherent_simulate.csv")).unwrap();
    let b = std::fs::read(second.join("coherent_simulate.csv")).unwrap();
    assert!(a == b, "CSV differs after rerunning from the echo");
    assert_eq!(read_json(&second.join("coherent_simulate.json")).unwrap(), report);
}

#[test]
fn optimize_delay_on_a_compensated_setup_adds_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = ffsqueeze(&["optimize-delay", "--scenario", "off_resonance", "--duration", "0.03", "--format", "json"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("no oscillation detected"));
    let report = read_json(&dir.path().join("off_resonance_optimize_delay.json")).unwrap();
    assert_eq!(report.quantity("additional_delay_s").unwrap().value, 0.0);
    assert!(!dir.path().join("off_resonance_optimize_delay.csv").exists());
}

#[test]
fn scenario_show_prints_a_loadable_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let out = ffsqueeze(&["scenario", "show", "on_resonance_displacement"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    let cfg = write(dir.path(), "shown.toml", &text);
    let r = parse_config(Path::new(&cfg), &Overrides::default()).unwrap();
    assert_eq!(r.preset.eta_e, 0.99);
    assert_eq!(r.preset.anchors.predicted_db, Some(-2.8));
}
