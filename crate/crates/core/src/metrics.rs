//! Per-method statistics over trial logs and their export formats.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{EventLog, Outcome, TrialRecord};
use crate::model::PairingMethod;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("log contains no trials")]
    EmptyLog,
    #[error("unknown export format {0:?} (expected csv, json, svg_time or svg_errors)")]
    UnknownFormat(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SummaryOptions {
    /// Leave timed-out trials out of mean and sd. They still count toward n
    /// and the error rates.
    pub exclude_timeouts: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodStats {
    pub method: PairingMethod,
    pub n: usize,
    pub mean_s: f64,
    pub sd_s: f64,
    pub fn_pct: f64,
    pub fp_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub methods: Vec<MethodStats>,
}

impl MetricsSummary {
    pub fn get(&self, m: PairingMethod) -> Option<&MethodStats> {
        self.methods.iter().find(|s| s.method == m)
    }
}

pub fn summarize(log: &EventLog) -> Result<MetricsSummary, MetricsError> {
    summarize_records(log.records(), SummaryOptions::default())
}

pub fn summarize_records(records: &[TrialRecord], opts: SummaryOptions) -> Result<MetricsSummary, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyLog);
    }
    let methods = PairingMethod::ALL
        .iter()
        .filter_map(|&m| {
            let trials: Vec<&TrialRecord> = records.iter().filter(|r| r.method == m).collect();
            (!trials.is_empty()).then(|| method_stats(m, &trials, opts))
        })
        .collect();
    Ok(MetricsSummary { methods })
}

fn is_timeout(r: &TrialRecord) -> bool {
    r.outcome == Outcome::SafeError && matches!(r.outcome_detail.as_str(), "timeout" | "trial_timeout")
}

fn method_stats(method: PairingMethod, trials: &[&TrialRecord], opts: SummaryOptions) -> MethodStats {
    let n = trials.len();
    let count = |o: Outcome| trials.iter().filter(|r| r.outcome == o).count();
    // Sorted so the floating-point result does not depend on log order.
    let mut durations: Vec<u64> = trials.iter().filter(|r| !(opts.exclude_timeouts && is_timeout(r))).map(|r| r.duration_ms).collect();
    durations.sort_unstable();
    let (mean_s, sd_s) = mean_sd_seconds(&durations);
    MethodStats {
        method,
        n,
        mean_s,
        sd_s,
        fn_pct: 100.0 * count(Outcome::SafeError) as f64 / n as f64,
        fp_pct: 100.0 * count(Outcome::FatalError) as f64 / n as f64,
    }
}

/// Mean and sample standard deviation, in seconds, of millisecond durations.
pub fn mean_sd_seconds(durations_ms: &[u64]) -> (f64, f64) {
    let n = durations_ms.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let total: u128 = durations_ms.iter().map(|&d| u128::from(d)).sum();
    let mean = total as f64 / n as f64 / 1000.0;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = durations_ms.iter().map(|&d| (d as f64 / 1000.0 - mean).powi(2)).sum();
    (mean, (ss / (n - 1) as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Json,
    SvgTime,
    SvgErrors,
}

impl FromStr for ExportFormat {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            "svg_time" => Ok(Self::SvgTime),
            "svg_errors" => Ok(Self::SvgErrors),
            other => Err(MetricsError::UnknownFormat(other.to_string())),
        }
    }
}

pub fn export(summary: &MetricsSummary, format: &str) -> Result<Vec<u8>, MetricsError> {
    Ok(export_as(summary, format.parse()?))
}

pub fn export_as(summary: &MetricsSummary, format: ExportFormat) -> Vec<u8> {
    match format {
        ExportFormat::Csv => to_csv(summary),
        ExportFormat::Json => to_json(summary),
        ExportFormat::SvgTime => bar_chart(summary, "Mean pairing time (s)", |s| (s.mean_s, Some(s.sd_s))),
        ExportFormat::SvgErrors => bar_chart(summary, "Safe error rate (%)", |s| (s.fn_pct, None)),
    }
    .into_bytes()
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

fn to_csv(summary: &MetricsSummary) -> String {
    let mut out = String::from("method,n,mean_s,sd_s,fn_pct,fp_pct\n");
    for s in &summary.methods {
        let _ = writeln!(out, "{},{},{:.6},{:.6},{:.6},{:.6}", s.method.code(), s.n, s.mean_s, s.sd_s, s.fn_pct, s.fp_pct);
    }
    out
}

fn to_json(summary: &MetricsSummary) -> String {
    let rounded = MetricsSummary {
        methods: summary
            .methods
            .iter()
            .map(|s| MethodStats {
                mean_s: round6(s.mean_s),
                sd_s: round6(s.sd_s),
                fn_pct: round6(s.fn_pct),
                fp_pct: round6(s.fp_pct),
                ..s.clone()
            })
            .collect(),
    };
    let mut out = serde_json::to_string_pretty(&rounded).expect("summary serializes");
    out.push('\n');
    out
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_LEFT: f64 = 60.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 60.0;

fn bar_chart(summary: &MetricsSummary, title: &str, value: impl Fn(&MethodStats) -> (f64, Option<f64>)) -> String {
    let plot_w = WIDTH - MARGIN_LEFT - 20.0;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let base_y = MARGIN_TOP + plot_h;
    let top = summary
        .methods
        .iter()
        .map(|s| {
            let (v, err) = value(s);
            v + err.unwrap_or(0.0)
        })
        .fold(0.0_f64, f64::max);
    let scale_max = if top > 0.0 { top * 1.1 } else { 1.0 };
    let slot = plot_w / summary.methods.len().max(1) as f64;
    let bar_w = slot * 0.6;

    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#);
    let _ = writeln!(svg, r#"  <title>{}</title>"#, xml_escape(title));
    let _ = writeln!(
        svg,
        r#"  <text class="title" x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="16">{}</text>"#,
        WIDTH / 2.0,
        xml_escape(title)
    );
    let _ = writeln!(svg, r#"  <line class="axis" x1="{MARGIN_LEFT}" y1="{base_y}" x2="{}" y2="{base_y}" stroke="black"/>"#, WIDTH - 20.0);
    let _ = writeln!(svg, r#"  <line class="axis" x1="{MARGIN_LEFT}" y1="{MARGIN_TOP}" x2="{MARGIN_LEFT}" y2="{base_y}" stroke="black"/>"#);
    for (i, s) in summary.methods.iter().enumerate() {
        let (v, err) = value(s);
        let h = v / scale_max * plot_h;
        let x = MARGIN_LEFT + slot * i as f64 + (slot - bar_w) / 2.0;
        let cx = x + bar_w / 2.0;
        let label = xml_escape(s.method.label());
        let _ = writeln!(
            svg,
            r#"  <rect class="bar" data-method="{}" x="{x:.2}" y="{:.2}" width="{bar_w:.2}" height="{h:.2}" fill="steelblue"><title>{label}: {v:.6}</title></rect>"#,
            s.method.code(),
            base_y - h
        );
        if let Some(e) = err {
            let y1 = base_y - (v - e).max(0.0) / scale_max * plot_h;
            let y2 = base_y - (v + e) / scale_max * plot_h;
            let _ = writeln!(svg, r#"  <line class="sd" x1="{cx:.2}" y1="{y1:.2}" x2="{cx:.2}" y2="{y2:.2}" stroke="black"/>"#);
        }
        let _ = writeln!(
            svg,
            r#"  <text class="value" x="{cx:.2}" y="{:.2}" text-anchor="middle" font-family="sans-serif" font-size="11">{v:.2}</text>"#,
            base_y - h - 4.0
        );
        let _ = writeln!(
            svg,
            r#"  <text class="label" x="{cx:.2}" y="{:.2}" text-anchor="middle" font-family="sans-serif" font-size="12">{label}</text>"#,
            base_y + 20.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::TrialMode;
    use crate::model::Scenario;

    pub(crate) fn record(method: PairingMethod, duration_ms: u64, outcome: Outcome) -> TrialRecord {
        let mut r = TrialRecord::for_scenario(&Scenario::minimal("fixture", method), 0, TrialMode::Headless);
        r.duration_ms = duration_ms;
        r.outcome = outcome;
        r
    }

    #[test]
    fn symmetric_fixture() {
        let log: EventLog = [10_000, 20_000, 30_000].into_iter().map(|d| record(PairingMethod::DtoB, d, Outcome::Success)).collect();
        let s = summarize(&log).unwrap();
        let d = s.get(PairingMethod::DtoB).unwrap();
        assert_eq!((d.n, d.mean_s, d.sd_s, d.fn_pct), (3, 20.0, 10.0, 0.0));
    }

    #[test]
    fn empty_log_is_an_error() {
        assert_eq!(summarize(&EventLog::new()), Err(MetricsError::EmptyLog));
    }

    #[test]
    fn single_trial_has_zero_sd() {
        let log: EventLog = std::iter::once(record(PairingMethod::BtoB, 5_000, Outcome::SafeError)).collect();
        let s = summarize(&log).unwrap();
        assert_eq!(s.methods[0].sd_s, 0.0);
        assert_eq!(s.methods[0].fn_pct, 100.0);
    }

    #[test]
    fn timeouts_can_be_left_out_of_timing() {
        let mut t = record(PairingMethod::LedToB, 60_000, Outcome::SafeError);
        t.outcome_detail = "trial_timeout".into();
        let recs = vec![record(PairingMethod::LedToB, 10_000, Outcome::Success), t];
        let with = summarize_records(&recs, SummaryOptions::default()).unwrap();
        let without = summarize_records(&recs, SummaryOptions { exclude_timeouts: true }).unwrap();
        assert_eq!(with.methods[0].mean_s, 35.0);
        assert_eq!(without.methods[0].mean_s, 10.0);
        assert_eq!(without.methods[0].fn_pct, 50.0);
    }

    #[test]
    fn csv_one_method_has_two_lines() {
        let log: EventLog = std::iter::once(record(PairingMethod::BeepToB, 1500, Outcome::Success)).collect();
        let csv = String::from_utf8(export(&summarize(&log).unwrap(), "csv").unwrap()).unwrap();
        assert_eq!(csv.lines().count(), 2);
        assert_eq!(csv.lines().next().unwrap(), "method,n,mean_s,sd_s,fn_pct,fp_pct");
        assert_eq!(csv.lines().nth(1).unwrap(), "beep2b,1,1.500000,0.000000,0.000000,0.000000");
    }

    #[test]
    fn unknown_format() {
        let log: EventLog = std::iter::once(record(PairingMethod::BtoB, 1, Outcome::Success)).collect();
        assert_eq!(export(&summarize(&log).unwrap(), "pdf"), Err(MetricsError::UnknownFormat("pdf".into())));
    }

    #[test]
    fn methods_follow_canonical_order() {
        let log: EventLog = [PairingMethod::LedToB, PairingMethod::BtoB, PairingMethod::DtoB]
            .into_iter()
            .map(|m| record(m, 1000, Outcome::Success))
            .collect();
        let order: Vec<_> = summarize(&log).unwrap().methods.iter().map(|s| s.method).collect();
        assert_eq!(order, vec![PairingMethod::BtoB, PairingMethod::DtoB, PairingMethod::LedToB]);
    }
}
