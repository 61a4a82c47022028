//! Run reports and their CSV/JSON renderings.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub const CSV_HEADER: &str =
    "stage,frequency_hz,psd_linear_rel_shot,psd_db_rel_shot,prediction_db,deviation_db";

/// One stage read off at one frequency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub stage: String,
    pub frequency_hz: f64,
    pub predicted_db: f64,
    pub simulated_db: Option<f64>,
    pub anchor_db: Option<f64>,
    pub deviation_db: Option<f64>,
}

/// A named scalar result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quantity {
    pub name: String,
    pub value: f64,
    pub unit: String,
    pub anchor: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumRow {
    pub stage: String,
    pub frequency_hz: f64,
    pub psd_linear: f64,
    pub psd_db: f64,
    pub prediction_db: f64,
    pub deviation_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub stage: String,
    pub frequency_hz: Option<f64>,
    pub value: f64,
    pub limit: f64,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub scenario: String,
    pub tool_version: String,
    pub generated_at: String,
    pub seed: Option<u64>,
    /// Resolved configuration in the input file format.
    pub config: String,
    pub summary: Vec<SummaryRow>,
    pub quantities: Vec<Quantity>,
    pub spectra: Vec<SpectrumRow>,
    pub checks: Vec<Check>,
    pub notes: Vec<String>,
}

impl RunReport {
    pub fn new(command: &str, scenario: &str, seed: Option<u64>, config: String) -> Self {
        Self {
            command: command.to_string(),
            scenario: scenario.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            generated_at: timestamp(),
            seed,
            config,
            summary: Vec::new(),
            quantities: Vec::new(),
            spectra: Vec::new(),
            checks: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn quantity(&self, name: &str) -> Option<&Quantity> {
        self.quantities.iter().find(|q| q.name == name)
    }

    pub fn push_quantity(&mut self, name: &str, value: f64, unit: &str, anchor: Option<f64>) {
        self.quantities.push(Quantity {
            name: name.to_string(),
            value,
            unit: unit.to_string(),
            anchor,
        });
    }

    pub fn file_stem(&self) -> String {
        format!("{}_{}", self.scenario, self.command.replace('-', "_"))
    }
}

/// RFC 3339 time of generation; `SOURCE_DATE_EPOCH` pins it for
/// reproducible output.
fn timestamp() -> String {
    let pinned = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse::<i64>().ok())
        .and_then(|t| chrono::DateTime::from_timestamp(t, 0));
    pinned
        .unwrap_or_else(chrono::Utc::now)
        .to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

fn fmt_db(v: f64) -> String {
    let s = format!("{v:.2}");
    if s == "-0.00" {
        "0.00".to_string()
    } else {
        s
    }
}

pub fn render_csv(report: &RunReport) -> String {
    let mut out = String::with_capacity(64 * (report.spectra.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in &report.spectra {
        let _ = writeln!(
            out,
            "{},{},{:.5e},{},{},{}",
            r.stage,
            r.frequency_hz,
            r.psd_linear,
            fmt_db(r.psd_db),
            fmt_db(r.prediction_db),
            fmt_db(r.deviation_db)
        );
    }
    out
}

pub fn render_json(report: &RunReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

/// Writes through a temporary file in the target directory and renames it
/// into place.
pub fn write_atomic(path: &Path, contents: &str) -> std::io::Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(contents.as_bytes())?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path).inspect_err(|_| {
        let _ = std::fs::remove_file(&tmp);
    })
}

pub fn emit_csv(report: &RunReport, path: &Path) -> std::io::Result<()> {
    write_atomic(path, &render_csv(report))
}

pub fn emit_json(report: &RunReport, path: &Path) -> std::io::Result<()> {
    write_atomic(path, &render_json(report))
}

pub fn read_json(path: &Path) -> std::io::Result<RunReport> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

fn fmt_quantity(v: f64) -> String {
    if v != 0.0 && !(1e-3..1e4).contains(&v.abs()) {
        format!("{v:.6e}")
    } else {
        format!("{v:.6}")
    }
}

fn opt_db(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), fmt_db)
}

/// Human-readable summary for the terminal.
pub fn render_summary(report: &RunReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{} {} (seed {}, ffsqueeze {})",
        report.command,
        report.scenario,
        report.seed.map_or_else(|| "-".to_string(), |s| s.to_string()),
        report.tool_version
    );
    if !report.summary.is_empty() {
        let _ = writeln!(
            out,
            "{:<36} {:>10} {:>9} {:>9} {:>9} {:>9}",
            "stage", "freq_hz", "pred_db", "sim_db", "anchor_db", "dev_db"
        );
        for r in &report.summary {
            let _ = writeln!(
                out,
                "{:<36} {:>10.0} {:>9} {:>9} {:>9} {:>9}",
                r.stage,
                r.frequency_hz,
                fmt_db(r.predicted_db),
                opt_db(r.simulated_db),
                opt_db(r.anchor_db),
                opt_db(r.deviation_db)
            );
        }
    }
    for q in &report.quantities {
        let anchor = q.anchor.map(|a| format!(" (anchor {a})")).unwrap_or_default();
        let _ = writeln!(out, "{:<32} {:>14} {}{}", q.name, fmt_quantity(q.value), q.unit, anchor);
    }
    for c in &report.checks {
        let _ = writeln!(
            out,
            "[{}] {} {}: {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.stage,
            c.detail
        );
    }
    for n in &report.notes {
        let _ = writeln!(out, "note: {n}");
    }
    out
}
