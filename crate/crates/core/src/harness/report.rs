//! Machine-readable experiment reports: the JSON report object, the CSV
//! views, 12-significant-digit number formatting, and atomic file writes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::harness::config::{Experiment, ExperimentConfig};
use crate::oracle::ExtReal;

/// A numeric cell's uncertainty: a sampling standard error, or the marker
/// that the value is analytic (no sampling involved).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StderrTag {
    Sampled(f64),
    Analytic,
}

impl Serialize for StderrTag {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            StderrTag::Sampled(x) => s.serialize_f64(*x),
            StderrTag::Analytic => s.serialize_str("analytic"),
        }
    }
}

impl<'de> Deserialize<'de> for StderrTag {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(x) => Ok(StderrTag::Sampled(x)),
            Raw::Str(s) if s == "analytic" => Ok(StderrTag::Analytic),
            Raw::Str(s) => Err(serde::de::Error::custom(format!(
                "expected number or \"analytic\", got {s:?}"
            ))),
        }
    }
}

/// One evaluated quantity: a table cell, a check scenario, a profile point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: String,
    pub estimate: ExtReal,
    pub stderr: StderrTag,
    /// Reference value the estimate is compared against, when one exists.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub oracle: Option<ExtReal>,
    /// Threshold or lower bound attached to this cell, when one exists.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bound: Option<f64>,
    /// Acceptance verdict; `None` marks informational cells.
    pub pass: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub note: Option<String>,
}

/// One named acceptance check (usually aggregating several cells).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Diagnostics block reported for every trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDiagnostics {
    pub label: String,
    pub nuclear_topk_share: f64,
    pub frobenius_topk_share: f64,
    pub numeric_rank: usize,
    pub max_angle_deg: f64,
    pub principal_angles_deg: Vec<f64>,
    pub projection_error: f64,
    pub first_objective: f64,
    pub final_objective: f64,
    pub exact_fallbacks: usize,
    pub tuned_lambda_bar: Vec<(usize, f64)>,
    pub singular_values: Vec<f64>,
}

/// Everything one experiment run produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub tool_version: String,
    pub experiment: Experiment,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub cells: Vec<CellResult>,
    pub models: Vec<ModelDiagnostics>,
    pub checks: Vec<CheckResult>,
    /// The one field that legitimately differs between reruns; compare
    /// reports with it masked.
    pub wall_clock_seconds: f64,
    pub all_passed: bool,
}

impl ExperimentReport {
    pub fn new(experiment: Experiment, config: &ExperimentConfig) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            experiment,
            seed: config.seed,
            config: config.clone(),
            cells: Vec::new(),
            models: Vec::new(),
            checks: Vec::new(),
            wall_clock_seconds: 0.0,
            all_passed: false,
        }
    }

    pub fn push_check(&mut self, name: &str, passed: bool, detail: String) {
        self.checks.push(CheckResult { name: name.to_string(), passed, detail });
    }

    /// Finalize the pass verdict from the recorded checks.
    pub fn seal(&mut self, wall_clock_seconds: f64) {
        self.wall_clock_seconds = wall_clock_seconds;
        self.all_passed = !self.checks.is_empty() && self.checks.iter().all(|c| c.passed);
    }
}

/// Format with (up to) 12 significant decimal digits, trimming trailing
/// zeros — the `%.12g` convention.
pub fn fmt_sig(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if x.is_nan() {
        return "nan".to_string();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let exp = x.abs().log10().floor() as i32;
    if !(-5..12).contains(&exp) {
        let s = format!("{:.11e}", x);
        let (mantissa, e) = s.split_once('e').expect("exponent format");
        let mantissa = mantissa.trim_end_matches('0').trim_end_matches('.');
        format!("{mantissa}e{e}")
    } else {
        let decimals = (11 - exp).max(0) as usize;
        let s = format!("{:.*}", decimals, x);
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    }
}

/// Round to 12 significant digits (the file-format precision), so the JSON
/// report and the CSV views carry identical numbers.
pub fn round_sig(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{:.11e}", x).parse().expect("round-trip of a finite float")
}

fn round_ext(x: ExtReal) -> ExtReal {
    match x {
        ExtReal::Finite(v) => ExtReal::Finite(round_sig(v)),
        ExtReal::Infinite => ExtReal::Infinite,
    }
}

/// A copy of the report with every float rounded to file precision.
fn rounded(report: &ExperimentReport) -> ExperimentReport {
    let mut r = report.clone();
    for c in &mut r.cells {
        c.estimate = round_ext(c.estimate);
        if let StderrTag::Sampled(s) = &mut c.stderr {
            *s = round_sig(*s);
        }
        c.oracle = c.oracle.map(round_ext);
        c.bound = c.bound.map(round_sig);
    }
    for m in &mut r.models {
        m.nuclear_topk_share = round_sig(m.nuclear_topk_share);
        m.frobenius_topk_share = round_sig(m.frobenius_topk_share);
        m.max_angle_deg = round_sig(m.max_angle_deg);
        m.projection_error = round_sig(m.projection_error);
        m.first_objective = round_sig(m.first_objective);
        m.final_objective = round_sig(m.final_objective);
        for s in &mut m.singular_values {
            *s = round_sig(*s);
        }
        for a in &mut m.principal_angles_deg {
            *a = round_sig(*a);
        }
    }
    r.wall_clock_seconds = round_sig(r.wall_clock_seconds);
    r
}

fn ext_csv(x: &ExtReal) -> String {
    match x {
        ExtReal::Finite(v) => fmt_sig(*v),
        ExtReal::Infinite => "inf".to_string(),
    }
}

/// Render the one-row-per-cell CSV view.
pub fn table_csv(report: &ExperimentReport) -> String {
    let mut out = String::from("experiment,cell,estimate,stderr,oracle,bound,pass\n");
    for c in &report.cells {
        let stderr = match c.stderr {
            StderrTag::Sampled(s) => fmt_sig(s),
            StderrTag::Analytic => "analytic".to_string(),
        };
        let oracle = c.oracle.as_ref().map(ext_csv).unwrap_or_default();
        let bound = c.bound.map(fmt_sig).unwrap_or_default();
        let pass = c.pass.map(|p| p.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            report.experiment,
            csv_field(&c.cell),
            ext_csv(&c.estimate),
            stderr,
            oracle,
            bound,
            pass
        ));
    }
    out
}

/// Render the per-model singular-value profiles.
pub fn spectrum_csv(report: &ExperimentReport) -> String {
    let mut out = String::from("model,index,singular_value,cumulative_nuclear_share\n");
    for m in &report.models {
        let total: f64 = m.singular_values.iter().sum();
        let mut cumulative = 0.0;
        for (i, s) in m.singular_values.iter().enumerate() {
            cumulative += s;
            let share = if total > 0.0 { cumulative / total } else { 0.0 };
            out.push_str(&format!(
                "{},{},{},{}\n",
                csv_field(&m.label),
                i,
                fmt_sig(*s),
                fmt_sig(share)
            ));
        }
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Write `report.json`, `table.csv`, and `spectrum.csv` (the latter only
/// when models were trained) into `dir`, each through a temp-file rename so
/// a crashed run never leaves a truncated report.
pub fn write_report(dir: &Path, report: &ExperimentReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let r = rounded(report);
    let json = serde_json::to_string_pretty(&r)?;
    write_atomic(&dir.join("report.json"), &json)?;
    write_atomic(&dir.join("table.csv"), &table_csv(&r))?;
    if !r.models.is_empty() {
        write_atomic(&dir.join("spectrum.csv"), &spectrum_csv(&r))?;
    }
    Ok(())
}

fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let file_name = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| crate::error::Error::Config(format!("bad output path {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{file_name}.tmp"));
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn significant_digit_formatting() {
        assert_eq!(fmt_sig(0.0), "0");
        assert_eq!(fmt_sig(0.125), "0.125");
        assert_eq!(fmt_sig(2.0 / 3.0), "0.666666666667");
        assert_eq!(fmt_sig(453.0 / 420.0), "1.07857142857");
        assert_eq!(fmt_sig(-0.5), "-0.5");
        assert_eq!(fmt_sig(1e-7), "1e-7");
        assert_eq!(fmt_sig(123456789012345.0), "1.23456789012e14");
        assert_eq!(fmt_sig(100.0), "100");
    }

    #[test]
    fn rounding_matches_formatting() {
        for x in [0.3888888888888889, 1.0785714285714287, 5.0 / 9.0, 1e-13, 7.25e14] {
            let r = round_sig(x);
            assert_eq!(fmt_sig(x), fmt_sig(r));
            assert!((r - x).abs() <= 1e-11 * x.abs());
        }
    }

    #[test]
    fn csv_views_render() {
        let config = ExperimentConfig::default();
        let mut report = ExperimentReport::new(Experiment::RankScan, &config);
        report.cells.push(CellResult {
            cell: "r=5".into(),
            estimate: ExtReal::Finite(7.0 / 18.0),
            stderr: StderrTag::Analytic,
            oracle: Some(ExtReal::Finite(7.0 / 18.0)),
            bound: None,
            pass: Some(true),
            note: None,
        });
        report.cells.push(CellResult {
            cell: "r=15".into(),
            estimate: ExtReal::Infinite,
            stderr: StderrTag::Analytic,
            oracle: None,
            bound: None,
            pass: None,
            note: None,
        });
        let csv = table_csv(&report);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "experiment,cell,estimate,stderr,oracle,bound,pass");
        assert_eq!(lines[1], "rank_scan,r=5,0.388888888889,analytic,0.388888888889,,true");
        assert_eq!(lines[2], "rank_scan,r=15,inf,analytic,,,");
    }

    #[test]
    fn spectrum_csv_accumulates_shares() {
        let config = ExperimentConfig::default();
        let mut report = ExperimentReport::new(Experiment::Table2, &config);
        report.models.push(ModelDiagnostics {
            label: "m".into(),
            nuclear_topk_share: 1.0,
            frobenius_topk_share: 1.0,
            numeric_rank: 2,
            max_angle_deg: 0.0,
            principal_angles_deg: vec![0.0],
            projection_error: 0.0,
            first_objective: 1.0,
            final_objective: 0.5,
            exact_fallbacks: 0,
            tuned_lambda_bar: vec![],
            singular_values: vec![3.0, 1.0],
        });
        let csv = spectrum_csv(&report);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[1], "m,0,3,0.75");
        assert_eq!(lines[2], "m,1,1,1");
    }

    #[test]
    fn reports_write_atomically_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let config = ExperimentConfig::default();
        let mut report = ExperimentReport::new(Experiment::Gradcheck, &config);
        report.push_check("demo", true, "ok".into());
        report.seal(0.25);
        write_report(dir.path(), &report).unwrap();

        let json = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
        let back: ExperimentReport = serde_json::from_str(&json).unwrap();
        assert!(back.all_passed);
        assert_eq!(back.experiment, Experiment::Gradcheck);
        assert!(dir.path().join("table.csv").exists());
        // No models were trained, so no spectrum view.
        assert!(!dir.path().join("spectrum.csv").exists());
        // No stray temp files.
        let leftovers: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().contains("tmp"))
            .collect();
        assert!(leftovers.is_empty());
    }

    #[test]
    fn stderr_tag_serialization() {
        assert_eq!(serde_json::to_string(&StderrTag::Analytic).unwrap(), "\"analytic\"");
        assert_eq!(serde_json::to_string(&StderrTag::Sampled(0.25)).unwrap(), "0.25");
        let tag: StderrTag = serde_json::from_str("\"analytic\"").unwrap();
        assert_eq!(tag, StderrTag::Analytic);
    }
}
