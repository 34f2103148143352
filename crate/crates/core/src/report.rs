//! Operating-characteristics reports: a lossless CSV and a human-readable text table.

use std::str::FromStr;

use crate::error::ReportError;
use crate::sim::OperatingCharacteristics;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Text,
}

impl FromStr for ReportFormat {
    type Err = ReportError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "text" | "text-table" | "table" => Ok(ReportFormat::Text),
            other => Err(ReportError::UnknownFormat(other.to_string())),
        }
    }
}

pub fn render_oc_report(oc: &OperatingCharacteristics, format: &str) -> Result<Vec<u8>, ReportError> {
    Ok(match format.parse::<ReportFormat>()? {
        ReportFormat::Csv => render_csv(oc).into_bytes(),
        ReportFormat::Text => render_text(oc).into_bytes(),
    })
}

const PER_DOSE: [&str; 5] = ["obd_pct", "mtd_pct", "mean_efficacy", "mean_enrolled", "mean_backfill"];
const SCALARS: [&str; 5] = [
    "mean_total_n",
    "mean_duration_days",
    "mean_duration_with_efficacy_days",
    "early_stop_pct",
    "mean_suspensions",
];

/// CSV with columns `metric,1..D,none,total`. Floats use shortest round-trip
/// formatting, so parsing the file back reproduces every value exactly.
pub fn render_csv(oc: &OperatingCharacteristics) -> String {
    let d = oc.num_doses;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["metric".to_string()];
    header.extend((1..=d).map(|i| i.to_string()));
    header.extend(["none".into(), "total".into()]);
    w.write_record(&header).expect("in-memory write");
    let blank = |n: usize| vec![String::new(); n];
    let mut row = |metric: &str, per: Vec<String>, none: String, total: String| {
        let mut r = vec![metric.to_string()];
        r.extend(per);
        r.push(none);
        r.push(total);
        w.write_record(&r).expect("in-memory write");
    };
    let fmt = |xs: &[f64]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    row("scenario", blank(d), String::new(), oc.scenario.clone());
    row("replicates", blank(d), String::new(), oc.replicates.to_string());
    row("obd_pct", fmt(&oc.obd_pct), oc.obd_none_pct.to_string(), String::new());
    row("mtd_pct", fmt(&oc.mtd_pct), oc.mtd_none_pct.to_string(), String::new());
    row("mean_efficacy", fmt(&oc.mean_efficacy), String::new(), String::new());
    row("mean_enrolled", fmt(&oc.mean_enrolled), String::new(), String::new());
    row("mean_backfill", fmt(&oc.mean_backfill), String::new(), String::new());
    for (name, v) in SCALARS.iter().zip([
        oc.mean_total_n,
        oc.mean_duration_days,
        oc.mean_duration_with_efficacy_days,
        oc.early_stop_pct,
        oc.mean_suspensions,
    ]) {
        row(name, blank(d), String::new(), v.to_string());
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
}

fn malformed(msg: impl Into<String>) -> ReportError {
    ReportError::Malformed(msg.into())
}

fn parse_f64(s: &str, what: &str) -> Result<f64, ReportError> {
    s.parse().map_err(|_| malformed(format!("{what}: not a number: {s:?}")))
}

/// Parse a CSV produced by [`render_csv`].
pub fn parse_oc_csv(text: &str) -> Result<OperatingCharacteristics, ReportError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = rdr.headers().map_err(|e| malformed(e.to_string()))?.clone();
    if header.len() < 4 || &header[0] != "metric" {
        return Err(malformed("missing metric header"));
    }
    let d = header.len() - 3;
    let mut oc = OperatingCharacteristics {
        scenario: String::new(),
        replicates: 0,
        num_doses: d,
        obd_pct: vec![],
        obd_none_pct: 0.0,
        mtd_pct: vec![],
        mtd_none_pct: 0.0,
        mean_efficacy: vec![],
        mean_enrolled: vec![],
        mean_backfill: vec![],
        mean_total_n: 0.0,
        mean_duration_days: 0.0,
        mean_duration_with_efficacy_days: 0.0,
        early_stop_pct: 0.0,
        mean_suspensions: 0.0,
    };
    let mut seen = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| malformed(e.to_string()))?;
        if rec.len() != d + 3 {
            return Err(malformed(format!("row has {} fields, expected {}", rec.len(), d + 3)));
        }
        let metric = rec[0].to_string();
        let total = &rec[d + 2];
        let per = || (1..=d).map(|i| parse_f64(&rec[i], &metric)).collect::<Result<Vec<_>, _>>();
        match metric.as_str() {
            "scenario" => oc.scenario = total.to_string(),
            "replicates" => {
                oc.replicates = total.parse().map_err(|_| malformed("replicates is not an integer"))?
            }
            "obd_pct" => {
                oc.obd_pct = per()?;
                oc.obd_none_pct = parse_f64(&rec[d + 1], "obd none")?;
            }
            "mtd_pct" => {
                oc.mtd_pct = per()?;
                oc.mtd_none_pct = parse_f64(&rec[d + 1], "mtd none")?;
            }
            "mean_efficacy" => oc.mean_efficacy = per()?,
            "mean_enrolled" => oc.mean_enrolled = per()?,
            "mean_backfill" => oc.mean_backfill = per()?,
            "mean_total_n" => oc.mean_total_n = parse_f64(total, &metric)?,
            "mean_duration_days" => oc.mean_duration_days = parse_f64(total, &metric)?,
            "mean_duration_with_efficacy_days" => oc.mean_duration_with_efficacy_days = parse_f64(total, &metric)?,
            "early_stop_pct" => oc.early_stop_pct = parse_f64(total, &metric)?,
            "mean_suspensions" => oc.mean_suspensions = parse_f64(total, &metric)?,
            other => return Err(malformed(format!("unknown metric {other:?}"))),
        }
        seen.push(metric);
    }
    for m in PER_DOSE.iter().chain(&SCALARS).chain(&["scenario", "replicates"]) {
        if !seen.iter().any(|s| s == m) {
            return Err(malformed(format!("missing row {m}")));
        }
    }
    Ok(oc)
}

/// Index of the per-row maximum (first on ties).
fn argmax(xs: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &x) in xs.iter().enumerate() {
        if best.is_none_or(|b| x > xs[b]) {
            best = Some(i);
        }
    }
    best
}

fn text_row(label: &str, xs: &[f64], cell: impl Fn(f64) -> String, tail: &str) -> String {
    let star = argmax(xs);
    let mut line = format!("{label:<30}");
    for (i, &x) in xs.iter().enumerate() {
        let mark = if Some(i) == star { "*" } else { " " };
        line.push_str(&format!("{:>9}{mark}", cell(x)));
    }
    if !tail.is_empty() {
        line.push_str(&format!("  {tail}"));
    }
    line.push('\n');
    line
}

/// Selection-table layout. Percentages to one decimal; `*` marks each row's maximum.
pub fn render_text(oc: &OperatingCharacteristics) -> String {
    let mut out = String::new();
    let title = if oc.scenario.is_empty() { "Scenario" } else { oc.scenario.as_str() };
    out.push_str(&format!("{title} ({} replicates)\n", oc.replicates));
    let mut header = format!("{:<30}", "Dose level");
    for d in 1..=oc.num_doses {
        header.push_str(&format!("{d:>9} "));
    }
    out.push_str(header.trim_end());
    out.push('\n');
    let pct = |x: f64| format!("{x:.1}%");
    out.push_str(&text_row("% of OBD selection", &oc.obd_pct, pct, &format!("none {:.1}%", oc.obd_none_pct)));
    out.push_str(&text_row("% of MTD selection", &oc.mtd_pct, pct, &format!("none {:.1}%", oc.mtd_none_pct)));
    out.push_str(&text_row("Efficacy estimation", &oc.mean_efficacy, |x| format!("{x:.2}"), ""));
    out.push_str(&text_row("Number of patients enrolled", &oc.mean_enrolled, |x| format!("{x:.1}"), ""));
    out.push_str(&text_row("Number of patients backfill", &oc.mean_backfill, |x| format!("{x:.1}"), ""));
    out.push_str(&format!("{:<30}{:.1}\n", "Mean total sample size", oc.mean_total_n));
    out.push_str(&format!("{:<30}{:.1}\n", "Trial duration (days)", oc.mean_duration_days));
    out.push_str(&format!("{:<30}{:.1}\n", "  incl. efficacy follow-up", oc.mean_duration_with_efficacy_days));
    out.push_str(&format!("{:<30}{:.1}%\n", "Early stop for safety", oc.early_stop_pct));
    out
}
